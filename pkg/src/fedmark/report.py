"""Metrics records, JSON-lines serialization, and atomic file writes.

A metrics report is a flat list of per-round / per-node records followed by
exactly one summary record. Serialization is canonical (sorted keys, no
whitespace) so identical experiments produce byte-identical files.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np


def jsonable(obj):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps_canonical(record) -> str:
    return json.dumps(jsonable(record), sort_keys=True, separators=(",", ":"))


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, **record):
        self.records.append(record)

    def to_jsonl(self) -> str:
        lines = [dumps_canonical(r) for r in self.records]
        lines.append(dumps_canonical({"summary": True, **self.summary}))
        return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str):
    """Write via temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    """Atomic CSV write; every value is rendered with repr-stable str()."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(jsonable(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
