"""Diagnosis-side analytics: activity features per subject, the
transform / variance-check / ANOVA pipeline, critical-biomarker selection,
and a small cross-validated diagnosis classifier."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .datagen import GROUPS, SAMPLE_PERIOD_S
from .errors import DataError, DegenerateInputError, FoldError, UndefinedStatisticError
from .losses import cross_entropy
from .seeds import rng_for, ANALYSIS
from .stats import (
    AnovaResult,
    boxcox_apply,
    boxcox_fit,
    levene_test,
    oneway_anova,
    select_critical,
)

DIAGNOSIS_TASKS = {
    "nc_mci": ("NC", "MCI"),
    "nonad_ad": ("nonAD", "AD"),
    "nc_mci_ad": ("NC", "MCI", "AD"),
}


@dataclass
class BiomarkerFeatureRow:
    subject_id: str
    group: str
    duration_frac: np.ndarray  # [n_classes], detected seconds / recording period
    freq_rate: np.ndarray  # [n_classes], episodes / recording period
    recording_period_s: float

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.recording_period_s <= 0:
            raise ValueError("recording_period_s must be > 0")


def extract_features(timeline, n_classes, recording_period_s=None,
                     sample_period_s=SAMPLE_PERIOD_S):
    """Duration and episode-frequency features from a detection timeline.

    `timeline` is a time-sorted list of (t_s, class_idx) detections on the
    sample grid. An episode is a maximal run of identical labels on
    consecutive grid points; a time gap breaks the run. Both features are
    normalized by the recording period (defaults to the timeline span).
    """
    if not timeline:
        raise DataError("empty detection timeline")
    ts = [t for t, _ in timeline]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise DataError("timeline must be strictly increasing in time")
    if recording_period_s is None:
        recording_period_s = ts[-1] - ts[0] + sample_period_s
    duration = np.zeros(n_classes)
    episodes = np.zeros(n_classes)
    prev_t, prev_c = None, None
    for t, c in timeline:
        if not 1 <= c <= n_classes:
            raise DataError(f"class {c} outside 1..{n_classes}")
        duration[c - 1] += sample_period_s
        contiguous = prev_t is not None and (t - prev_t) <= sample_period_s
        if not (contiguous and c == prev_c):
            episodes[c - 1] += 1
        prev_t, prev_c = t, c
    return duration / recording_period_s, episodes / recording_period_s


def feature_matrix(rows):
    """Stack rows into [n_subjects, 2C] with stable feature names:
    duration_frac_c then freq_rate_c for classes 1..C."""
    if not rows:
        raise DataError("no feature rows")
    c = len(rows[0].duration_frac)
    names = [f"duration_frac_{i + 1}" for i in range(c)] + [f"freq_rate_{i + 1}" for i in range(c)]
    x = np.stack([np.concatenate([r.duration_frac, r.freq_rate]) for r in rows])
    return x, names


@dataclass
class FeatureTestResult:
    name: str
    anova: AnovaResult | None  # None for degenerate (constant) features
    levene_p: float | None
    boxcox_lambda: float | None


@dataclass
class AnalysisResult:
    tests: list  # FeatureTestResult per feature, matrix column order
    critical: set
    levene_mean_p: float
    equality_warning: bool


def analyze_features(rows, alpha=0.05):
    """Per-feature pipeline: Box-Cox transform, Brown-Forsythe variance
    check, one-way ANOVA across diagnosis groups, then strict p < alpha
    critical selection. Constant features are reported as degenerate and
    excluded. The variance check is reported, not enforced: a low mean
    Levene p only sets a warning flag."""
    x, names = feature_matrix(rows)
    groups_present = [g for g in GROUPS if any(r.group == g for r in rows)]
    if len(groups_present) < 2:
        raise DataError("need at least 2 diagnosis groups")
    masks = {g: np.array([r.group == g for r in rows]) for g in groups_present}
    tests = []
    p_values = {}
    levene_ps = []
    for j, name in enumerate(names):
        col = x[:, j]
        try:
            fit = boxcox_fit(col)
            y = boxcox_apply(col, fit)
            groups = [y[masks[g]] for g in groups_present]
            lev = levene_test(groups)
            res = oneway_anova(groups)
        except (DegenerateInputError, UndefinedStatisticError):
            tests.append(FeatureTestResult(name, None, None, None))
            p_values[name] = math.nan
            continue
        tests.append(FeatureTestResult(name, res, lev.p_value, fit.lam))
        p_values[name] = res.p_value
        levene_ps.append(lev.p_value)
    critical = select_critical(p_values, alpha)
    mean_p = float(np.mean(levene_ps)) if levene_ps else math.nan
    warning = not math.isnan(mean_p) and mean_p <= 0.05
    return AnalysisResult(tests, critical, mean_p, warning)


# ---------------------------------------------------------------------------
# diagnosis classifier

def _task_label(group, task):
    if task == "nc_mci":
        return {"NC": 0, "MCI": 1}.get(group)
    if task == "nonad_ad":
        return 1 if group == "AD" else 0
    if task == "nc_mci_ad":
        return {"NC": 0, "MCI": 1, "AD": 2}[group]
    raise ValueError(f"unknown task {task!r}; expected one of {sorted(DIAGNOSIS_TASKS)}")


def fold_assignments(subject_ids, labels, k, seed):
    """Stratified fold index per subject; a pure function of
    (subject_ids, seed). Within each class, subjects are shuffled in
    sorted-id order and dealt round-robin."""
    folds = {}
    for cls in sorted(set(labels)):
        members = sorted(sid for sid, y in zip(subject_ids, labels) if y == cls)
        if len(members) < k:
            raise FoldError(f"class {cls} has {len(members)} subjects, need >= {k}")
        rng = rng_for(seed, ANALYSIS, cls)
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            folds[members[idx]] = pos % k
    return folds


def diagnose_cv(rows, task="nc_mci_ad", k=3, seed=0, hidden_dim=16,
                epochs=300, learning_rate=0.05):
    """Stratified k-fold diagnosis from biomarker features.

    Features are z-scored with fold-train statistics only; the classifier
    is a one-hidden-layer dense net trained with full-batch SGD on
    cross-entropy. Returns (confusion matrix [class, predicted], accuracy).
    """
    if task not in DIAGNOSIS_TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(DIAGNOSIS_TASKS)}")
    usable = [(r, _task_label(r.group, task)) for r in rows]
    usable = [(r, y) for r, y in usable if y is not None]
    if not usable:
        raise DataError("no subjects match the task groups")
    x, _ = feature_matrix([r for r, _ in usable])
    y = np.array([lab for _, lab in usable])
    ids = [r.subject_id for r, _ in usable]
    n_classes = len(DIAGNOSIS_TASKS[task])
    folds = fold_assignments(ids, y, k, seed)
    fold_of = np.array([folds[sid] for sid in ids])
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for fold in range(k):
        test = fold_of == fold
        train = ~test
        mu = x[train].mean(axis=0)
        sd = x[train].std(axis=0)
        sd[sd == 0.0] = 1.0
        xtr, xte = (x[train] - mu) / sd, (x[test] - mu) / sd
        net = nn.init_net([x.shape[1], hidden_dim, n_classes], rng_for(seed, ANALYSIS, 100 + fold))
        cfg = nn.SGDConfig(learning_rate, batch_size=max(1, int(train.sum())))
        for _ in range(epochs):
            logits, trace = nn.forward_trace(net, xtr)
            _, grad = cross_entropy(logits, y[train])
            grads, _ = nn.backward_from_trace(net, trace, grad)
            net = nn.sgd_step(net, grads, cfg)
        pred = nn.forward(net, xte).argmax(axis=1)
        for t, p in zip(y[test], pred):
            confusion[t, p] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    return confusion, accuracy


# ---------------------------------------------------------------------------
# file ingestion for the analyze pipeline

def read_detections_csv(path):
    """Parse a `t_s,class_idx` detection CSV (header required)."""
    timeline = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t_s", "class_idx"}.issubset(reader.fieldnames):
            raise DataError(f"{path}: header must be t_s,class_idx")
        for i, row in enumerate(reader, start=2):
            try:
                timeline.append((float(row["t_s"]), int(row["class_idx"])))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{i}: bad detection row ({exc})") from None
    return timeline


def read_groups_csv(path):
    """Parse a `subject_id,group` CSV (header required)."""
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"subject_id", "group"}.issubset(reader.fieldnames):
            raise DataError(f"{path}: header must be subject_id,group")
        for i, row in enumerate(reader, start=2):
            g = row["group"]
            if g not in GROUPS:
                raise DataError(f"{path}:{i}: unknown group {g!r}")
            groups[row["subject_id"]] = g
    return groups
