"""Weak supervision from coarse activity logs.

A caregiver log entry covers a time range with a coarse label such as
"having_a_meal". The coarse label licenses a set of fine activity classes;
samples inside the entry are chunked into time-ordered batches, each batch
carrying a label multiset, and training minimizes cross-entropy over
candidate assignments of that multiset to the batch samples.
"""

import csv
import itertools
import json
from bisect import bisect_left
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DataError, MappingError, ShapeError
from .losses import log_softmax

EXHAUSTIVE_LIMIT = 5  # batches up to this size enumerate every assignment


@dataclass(frozen=True)
class ActivityLogEntry:
    start: float
    end: float
    coarse_label: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"entry must have start < end, got [{self.start}, {self.end}]")


@dataclass(frozen=True)
class WeakLabelMap:
    """coarse label -> sorted tuple of licensed fine class indices (1-based)."""

    mapping: dict
    n_classes: int

    def __post_init__(self):
        for coarse, fines in self.mapping.items():
            if not fines:
                raise ValueError(f"coarse label {coarse!r} maps to an empty set")
            for c in fines:
                if not 1 <= c <= self.n_classes:
                    raise ValueError(
                        f"{coarse!r} maps to class {c}, outside 1..{self.n_classes}"
                    )

    @classmethod
    def from_mapping(cls, mapping, n_classes):
        clean = {k: tuple(sorted(set(int(c) for c in v))) for k, v in mapping.items()}
        return cls(clean, int(n_classes))

    def coarse_labels_for(self, fine: int):
        """Coarse categories whose licensed set contains `fine`, sorted."""
        return sorted(k for k, v in self.mapping.items() if fine in v)


def load_activity_table(name="desk8"):
    """Load a bundled class table. Returns (class names by index, WeakLabelMap)."""
    raw = json.loads(resources.files("fedmark.data").joinpath("activities.json").read_text())
    try:
        table = raw["tables"][name]
    except KeyError:
        raise KeyError(f"no activity table named {name!r}") from None
    names = {int(c["index"]): c["name"] for c in table["classes"]}
    label_map = WeakLabelMap.from_mapping(table["coarse_map"], len(names))
    return names, label_map


def map_coarse_to_fine(entry: ActivityLogEntry, label_map: WeakLabelMap):
    """Fine classes licensed by the entry's coarse label."""
    try:
        return set(label_map.mapping[entry.coarse_label])
    except KeyError:
        raise MappingError(f"unknown coarse label {entry.coarse_label!r}") from None


@dataclass
class WeakBatch:
    samples: list  # strictly increasing timestamps, all inside one log entry
    label_multiset: list  # fine labels (1-based), same length as samples

    def __post_init__(self):
        if len(self.samples) != len(self.label_multiset):
            raise ValueError("need exactly one licensed label per sample")
        ts = [s.timestamp for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("samples must be strictly increasing in time")


def read_activity_log(path):
    """Parse a `start_s,end_s,coarse_label` CSV (header required)."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"start_s", "end_s", "coarse_label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"activity log {path} must have header start_s,end_s,coarse_label")
        for i, row in enumerate(reader, start=2):
            try:
                entries.append(
                    ActivityLogEntry(float(row["start_s"]), float(row["end_s"]), row["coarse_label"])
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{i}: bad log row ({exc})") from None
    return entries


def activity_log_from_stream(stream):
    """Compress a sample stream's coarse labels into log entries.

    Consecutive samples sharing a coarse label become one entry; unlabeled
    samples break runs. Entry end extends one sample period past the last
    sample so the closing sample falls inside the half-open interval.
    """
    entries = []
    run_label, run_start, prev_t = None, None, None
    period = 2.0
    for s in stream:
        if s.coarse_label != run_label or (prev_t is not None and s.timestamp - prev_t > period):
            if run_label is not None:
                entries.append(ActivityLogEntry(run_start, prev_t + period, run_label))
            run_label = s.coarse_label
            run_start = s.timestamp
        prev_t = s.timestamp
    if run_label is not None:
        entries.append(ActivityLogEntry(run_start, prev_t + period, run_label))
    return entries


def associate(log, stream, label_map: WeakLabelMap, batch_size: int):
    """Attach licensed label multisets to time-ordered sample batches.

    Samples inside each log entry [start, end) are chunked into consecutive
    batches of at most `batch_size`; each batch's multiset cycles the
    entry's licensed fine classes in sorted order. Samples outside every
    entry are dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ts = [s.timestamp for s in stream]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise DataError("stream timestamps must be sorted")
    entries = sorted(log, key=lambda e: e.start)
    for a, b in zip(entries, entries[1:]):
        if b.start < a.end:
            raise DataError(f"log entries overlap: [{a.start},{a.end}) and [{b.start},{b.end})")
    batches = []
    for entry in entries:
        fines = sorted(map_coarse_to_fine(entry, label_map))
        lo = bisect_left(ts, entry.start)
        hi = bisect_left(ts, entry.end)
        for i in range(lo, hi, batch_size):
            chunk = stream[i:min(i + batch_size, hi)]
            labels = [fines[j % len(fines)] for j in range(len(chunk))]
            batches.append(WeakBatch(list(chunk), labels))
    return batches


def permutation_ce_loss(logits, label_multiset, budget, rng):
    """Cross-entropy minimized over assignments of the label multiset.

    `label_multiset` holds 0-based class column indices, one per row of
    `logits`. Small batches (<= 5) enumerate every distinct assignment;
    larger ones evaluate the identity plus up to `budget` distinct sampled
    permutations. Returns (loss, grad wrt logits, best_assignment).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = tuple(int(c) for c in label_multiset)
    b = logits.shape[0]
    if logits.ndim != 2 or len(labels) != b:
        raise ShapeError(f"logits {logits.shape} vs {len(labels)} labels")
    if any(not 0 <= c < logits.shape[1] for c in labels):
        raise ShapeError("label outside logit columns")

    if b <= EXHAUSTIVE_LIMIT:
        assignments = sorted(set(itertools.permutations(labels)))
    else:
        assignments = [labels]
        seen = {labels}
        attempts = 0
        while len(assignments) < budget + 1 and attempts < 20 * max(budget, 1):
            perm = tuple(labels[i] for i in rng.permutation(b))
            attempts += 1
            if perm not in seen:
                seen.add(perm)
                assignments.append(perm)

    logp = log_softmax(logits)
    rows = np.arange(b)
    best_loss, best = np.inf, None
    for assign in assignments:
        ce = -logp[rows, list(assign)].mean()
        if ce < best_loss:
            best_loss, best = ce, assign
    grad = np.exp(logp)
    grad[rows, list(best)] -= 1.0
    return float(best_loss), grad / b, best
