"""Synthetic multi-modal subject streams.

Each subject draws a skewed class distribution (Dirichlet over a subset of
classes, tilted by diagnosis group), then emits one sample every 2 seconds
in runs of a single activity. Per-modality features are a shared class
prototype plus noise, pushed through a per-subject affine domain shift, so
streams are non-i.i.d. across subjects but share cross-subject structure.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError
from .losses import MODALITIES
from .report import dumps_canonical, atomic_write_text

GROUPS = ("NC", "MCI", "AD")
SAMPLE_PERIOD_S = 2.0

# class-mass tilt toward low-index (sedentary) classes, by diagnosis group
GROUP_TILT_STRENGTH = {"NC": 0.0, "MCI": 0.6, "AD": 1.2}

DEFAULT_MODALITY_DIMS = {"depth": 64, "radar": 32, "audio": 16}


@dataclass(frozen=True)
class DomainShift:
    """Per-modality affine feature transform: x -> mix @ (scale * x) + offset.

    `scale` is the diagonal part; `mix` (optional) blends in a random
    rotation so a model fitted to other subjects sees genuinely displaced
    feature geometry, not just a per-axis rescaling."""

    scale: dict  # modality -> [dim]
    offset: dict  # modality -> [dim]
    mix: Optional[dict] = None  # modality -> [dim, dim]

    def apply(self, modality, x):
        y = x * self.scale[modality]
        if self.mix is not None:
            y = self.mix[modality] @ y
        return y + self.offset[modality]


def draw_domain_shift(dims, rng, mixing=0.0, scale_range=(0.5, 2.0), offset_bound=1.0) -> DomainShift:
    """Random per-subject shift. `mixing` in [0, 1] interpolates the scale
    matrix between pure diagonal (0) and a random rotation (1)."""
    scale, offset, mix = {}, {}, {}
    for m in MODALITIES:
        if m in dims:
            scale[m] = rng.uniform(scale_range[0], scale_range[1], size=dims[m])
            offset[m] = rng.uniform(-offset_bound, offset_bound, size=dims[m])
            if mixing > 0.0:
                q, r = np.linalg.qr(rng.normal(size=(dims[m], dims[m])))
                q = q * np.sign(np.diag(r))  # unique orientation
                mix[m] = (1.0 - mixing) * np.eye(dims[m]) + mixing * q
    return DomainShift(scale, offset, mix if mixing > 0.0 else None)


def identity_domain_shift(dims) -> DomainShift:
    return DomainShift(
        {m: np.ones(d) for m, d in dims.items()},
        {m: np.zeros(d) for m, d in dims.items()},
    )


@dataclass
class SubjectProfile:
    subject_id: str
    group: str
    dirichlet_alpha: float
    domain_shift: DomainShift
    available_modalities: tuple = MODALITIES
    label_fraction: float = 0.1
    activity_richness: int = 8

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in [0, 1]")
        if not self.available_modalities:
            raise ValueError("a subject needs at least one modality")


@dataclass
class MultiModalSample:
    timestamp: float
    modality_data: dict  # modality -> feature vector
    human_present: bool = True
    fine_label: Optional[int] = None  # 1-based class index
    coarse_label: Optional[str] = None


@dataclass
class ClassDistribution:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def proportions(self) -> np.ndarray:
        t = self.counts.sum()
        return self.counts / t if t else np.zeros_like(self.counts, dtype=float)


@dataclass
class DataGenConfig:
    n_classes: int = 8
    modality_dims: dict = field(default_factory=lambda: dict(DEFAULT_MODALITY_DIMS))
    noise_sigma: float = 0.3
    mean_run_samples: int = 6
    runs_per_block: int = 4  # activity runs per coarse log block
    presence_rate: float = 0.93
    coarse_fraction: float = 0.75  # probability a block is covered by the activity log


def make_prototypes(n_classes, dims, rng):
    """One unit-Gaussian prototype per (modality, class), shared by all
    subjects before domain shift."""
    return {m: rng.normal(0.0, 1.0, size=(n_classes, dims[m])) for m in MODALITIES if m in dims}


def _sedentary_scores(n_classes):
    # class 1 most sedentary, class C most active
    if n_classes == 1:
        return np.ones(1)
    return 1.0 - np.arange(n_classes) / (n_classes - 1)


def subject_class_probs(profile: SubjectProfile, n_classes, rng):
    """Pick the subject's active class subset and its categorical weights."""
    strength = GROUP_TILT_STRENGTH[profile.group]
    scores = _sedentary_scores(n_classes)
    sel = np.exp(strength * scores)
    sel = sel / sel.sum()
    richness = min(profile.activity_richness, n_classes)
    chosen = np.sort(rng.choice(n_classes, size=richness, replace=False, p=sel))
    w = rng.dirichlet(np.full(richness, profile.dirichlet_alpha))
    w = w * np.exp(strength * scores[chosen])
    return chosen, w / w.sum()


def generate_subject_stream(profile, duration_s, rng, prototypes, label_map, cfg: DataGenConfig):
    """One sample per 2 s for `duration_s`, structured as coarse blocks of
    activity runs.

    Each block picks a seed class from the subject's skewed distribution
    and the coarse category covering it, then emits a few runs drawn from
    that category's licensed classes, so a block's class mix resembles the
    label multiset a caregiver log entry licenses. Per-block flags decide
    human presence and log coverage (the coarse label); fine labels are
    kept per sample with probability `profile.label_fraction`.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    n_samples = int(duration_s // SAMPLE_PERIOD_S)
    chosen, probs = subject_class_probs(profile, cfg.n_classes, rng)
    sigma = cfg.noise_sigma
    stream = []
    idx = 0
    while idx < n_samples:
        seed_cls = int(chosen[rng.choice(len(chosen), p=probs)]) + 1
        present = bool(rng.random() < cfg.presence_rate)
        coarse = None
        candidates = label_map.coarse_labels_for(seed_cls)
        if candidates:
            coarse = candidates[int(rng.integers(len(candidates)))]
        logged = present and coarse is not None and rng.random() < cfg.coarse_fraction
        licensed = sorted(label_map.mapping[coarse]) if coarse else [seed_cls]
        for _ in range(cfg.runs_per_block):
            if idx >= n_samples:
                break
            cls = int(licensed[rng.integers(len(licensed))])
            run_len = int(rng.geometric(1.0 / cfg.mean_run_samples))
            for _ in range(min(run_len, n_samples - idx)):
                data = {}
                for m in profile.available_modalities:
                    x = rng.normal(0.0, sigma, size=prototypes[m].shape[1])
                    if present:
                        x = x + prototypes[m][cls - 1]
                    data[m] = profile.domain_shift.apply(m, x)
                fine = None
                if present and rng.random() < profile.label_fraction:
                    fine = cls
                stream.append(
                    MultiModalSample(
                        idx * SAMPLE_PERIOD_S, data, present, fine,
                        coarse if logged else None,
                    )
                )
                idx += 1
    return stream


@dataclass
class DataSelectionPolicy:
    window_start_s: float = 7 * 3600.0
    window_end_s: float = 19 * 3600.0
    rate: float = 0.01
    drop_absent: bool = True

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("rate must be in (0, 1]")


def select_data(stream, policy: DataSelectionPolicy):
    """Deployment data-reduction filters, applied in order: time-of-day
    window, even 1-in-k stride, human-presence. Output is a subsequence."""
    kept = [
        s for s in stream
        if policy.window_start_s <= s.timestamp % 86400.0 < policy.window_end_s
    ]
    k = int(1.0 // policy.rate)
    kept = kept[::k]
    if policy.drop_absent:
        kept = [s for s in kept if s.human_present]
    return kept


def class_distribution(stream, n_classes) -> ClassDistribution:
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in stream:
        if s.fine_label is not None:
            counts[s.fine_label - 1] += 1
    return ClassDistribution(counts)


def export_stream_jsonl(stream, path):
    """One JSON object per sample, for inspection."""
    if not stream:
        raise DataError("refusing to export an empty stream")
    lines = []
    for s in stream:
        lines.append(dumps_canonical({
            "timestamp": s.timestamp,
            "human_present": s.human_present,
            "fine_label": s.fine_label,
            "coarse_label": s.coarse_label,
            "modality_data": {m: list(v) for m, v in s.modality_data.items()},
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")
