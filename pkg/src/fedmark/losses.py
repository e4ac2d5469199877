"""Loss functions and fusion-based feature augmentation.

Three loss families drive the learning stages: a contrastive loss over
fused multi-modal feature views (unsupervised stage), inverse-frequency
balanced cross-entropy, and teacher-student distillation (weak stage).
Each returns (loss, analytic gradient); every gradient is checked against
finite differences in the test suite.
"""

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, CountError, DegenerateInputError, ModalityError, ShapeError
from .nn import l2_normalize, l2_normalize_backward

MODALITIES = ("depth", "radar", "audio")  # canonical order, closed set


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(logits, labels):
    """Mean cross-entropy over the batch. Returns (loss, grad wrt logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


# ---------------------------------------------------------------------------
# fusion-based augmentation

@dataclass(frozen=True)
class ConcatProject:
    """Concatenate embeddings over the canonical modality order (zeros for
    absent modalities) and apply a fixed projection back to embed_dim."""

    projection: np.ndarray  # [len(MODALITIES) * d, d]

    def __post_init__(self):
        object.__setattr__(self, "projection", np.asarray(self.projection, np.float64))


@dataclass(frozen=True)
class WeightedSum:
    """Fixed weights over modalities; None means uniform over present ones."""

    weights: Optional[Mapping[str, float]] = None


@dataclass(frozen=True)
class RandomSimplex:
    """Weights drawn from a flat Dirichlet over present modalities per call."""


@dataclass(frozen=True)
class RandomOneHot:
    """All weight on one randomly chosen present modality per call."""


def default_fusion_recipes(embed_dim: int, rng) -> list:
    """The default P=4 recipe set: one projection view plus three
    weighted-sum views of increasing randomness."""
    bound = 1.0 / np.sqrt(len(MODALITIES) * embed_dim)
    proj = rng.uniform(-bound, bound, size=(len(MODALITIES) * embed_dim, embed_dim))
    return [ConcatProject(proj), WeightedSum(None), RandomSimplex(), RandomOneHot()]


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    fusion_spec: list = field(default_factory=list)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if len(self.fusion_spec) < 2:
            raise ConfigError("need at least 2 fusion recipes")

    @property
    def fusions_per_sample(self) -> int:
        return len(self.fusion_spec)


@dataclass
class FusedFeatureSet:
    """N*P fused feature rows, sample-major: rows n*P .. n*P+P-1 come from
    source sample n. `resolved` keeps the per-recipe parameters actually
    used, which the backward pass needs."""

    features: np.ndarray  # [N*P, d], rows unit-norm
    source_ids: np.ndarray  # [N*P]
    fusions_per_sample: int
    prenorm: Optional[np.ndarray] = None
    resolved: Optional[list] = None
    present: Optional[tuple] = None


def _resolve_recipe(recipe, present, rng):
    if isinstance(recipe, ConcatProject):
        return ("proj", recipe.projection)
    if isinstance(recipe, WeightedSum):
        if recipe.weights is None:
            w = {m: 1.0 / len(present) for m in present}
        else:
            for m in recipe.weights:
                if m not in MODALITIES:
                    raise ModalityError(f"unknown modality {m!r}")
                if m not in present:
                    raise ModalityError(f"recipe references absent modality {m!r}")
            w = dict(recipe.weights)
        return ("ws", w)
    if isinstance(recipe, RandomSimplex):
        draws = rng.dirichlet(np.ones(len(present)))
        return ("ws", dict(zip(present, draws)))
    if isinstance(recipe, RandomOneHot):
        idx = int(rng.integers(len(present)))
        return ("ws", {present[idx]: 1.0})
    raise ConfigError(f"unknown fusion recipe {recipe!r}")


def freeze_recipes(spec: ContrastiveConfig, present, rng) -> ContrastiveConfig:
    """Resolve the random recipes once (e.g. per training round) against the
    present modalities, so every batch in the round fuses the same way."""
    present = tuple(m for m in MODALITIES if m in present)
    frozen = []
    for recipe in spec.fusion_spec:
        kind, params = _resolve_recipe(recipe, present, rng)
        frozen.append(ConcatProject(params) if kind == "proj" else WeightedSum(params))
    return ContrastiveConfig(spec.temperature, frozen)


def fuse_features(unimodal_embeddings, spec: ContrastiveConfig, rng) -> FusedFeatureSet:
    """Augment per-modality embeddings into N*P normalized fused views.

    `unimodal_embeddings` maps modality -> [N, d]; all present modalities
    must agree on N and d. Random recipes draw from `rng` once per call.
    """
    if not unimodal_embeddings:
        raise ModalityError("no modalities present")
    present = tuple(m for m in MODALITIES if m in unimodal_embeddings)
    if len(present) != len(unimodal_embeddings):
        unknown = set(unimodal_embeddings) - set(MODALITIES)
        raise ModalityError(f"unknown modalities {sorted(unknown)}")
    embs = {m: np.asarray(unimodal_embeddings[m], np.float64) for m in present}
    n, d = embs[present[0]].shape
    for m in present:
        if embs[m].shape != (n, d):
            raise ShapeError(f"embedding shapes disagree: {m} is {embs[m].shape}")

    resolved = [_resolve_recipe(r, present, rng) for r in spec.fusion_spec]
    p = len(resolved)
    prenorm = np.empty((n * p, d))
    for j, (kind, params) in enumerate(resolved):
        if kind == "proj":
            z = np.zeros((n, len(MODALITIES) * d))
            for k, m in enumerate(MODALITIES):
                if m in embs:
                    z[:, k * d:(k + 1) * d] = embs[m]
            u = z @ params
        else:
            u = np.zeros((n, d))
            for m, w in params.items():
                u += w * embs[m]
        prenorm[j::p] = u
    features = l2_normalize(prenorm)
    source_ids = np.repeat(np.arange(n), p)
    return FusedFeatureSet(features, source_ids, p, prenorm, resolved, present)


def fuse_features_backward(fs: FusedFeatureSet, grad_features):
    """Gradient w.r.t. the unimodal embeddings that produced `fs`."""
    if fs.prenorm is None or fs.resolved is None:
        raise ValueError("FusedFeatureSet lacks backward info")
    g = l2_normalize_backward(fs.prenorm, grad_features)
    d = fs.features.shape[1]
    p = fs.fusions_per_sample
    grads = {m: 0.0 for m in fs.present}
    for j, (kind, params) in enumerate(fs.resolved):
        gu = g[j::p]
        if kind == "proj":
            gz = gu @ params.T
            for k, m in enumerate(MODALITIES):
                if m in grads:
                    grads[m] = grads[m] + gz[:, k * d:(k + 1) * d]
        else:
            for m, w in params.items():
                grads[m] = grads[m] + w * gu
    return grads


# ---------------------------------------------------------------------------
# contrastive fusion loss

def contrastive_fusion_loss(fs: FusedFeatureSet, temperature: float):
    """Contrastive loss over fused views: views of the same source sample
    attract, views of other samples repel.

    For each row s with positive set P(s) (same source, other view):

        sum_s -1/|P(s)| * sum_{p in P(s)}
            log[ exp(v_s.v_p / t) / sum_{a != s} exp(v_s.v_a / t) ]

    Returns (loss, grad w.r.t. fs.features).
    """
    v = np.asarray(fs.features, dtype=np.float64)
    src = np.asarray(fs.source_ids)
    s_total = v.shape[0]
    if s_total < 3:
        raise ConfigError(f"need at least 3 fused features, got {s_total}")
    norms = np.linalg.norm(v, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DegenerateInputError("feature rows must be unit-norm")

    sim = (v @ v.T) / temperature
    eye = np.eye(s_total, dtype=bool)
    pos = (src[:, None] == src[None, :]) & ~eye
    sizes = pos.sum(axis=1)
    if np.any(sizes == 0):
        raise ConfigError("every view needs at least one positive partner")

    # log-sum-exp over a != s
    masked = np.where(eye, -np.inf, sim)
    m = masked.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(masked - m).sum(axis=1, keepdims=True)))[:, 0]

    loss = float(lse.sum() - ((sim * pos).sum(axis=1) / sizes).sum())

    # gradient: (1/t) * ((W - M) + (W - M)^T) V, with W the row softmax over
    # a != s and M the row-normalized positive mask
    w = np.exp(sim - lse[:, None])
    w[eye] = 0.0
    mmat = pos / sizes[:, None]
    a = w - mmat
    grad = (a + a.T) @ v / temperature
    return loss, grad


# ---------------------------------------------------------------------------
# balanced cross-entropy and distillation

@dataclass
class ClassCounts:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ValueError("counts must be a 1-d nonnegative array")
        if not np.any(self.counts > 0):
            raise CountError("at least one class must have a positive count")

    def weights(self) -> np.ndarray:
        """Normalized inverse-frequency weights; mean 1 over present classes,
        zero for absent ones. Uniform present counts give exactly 1.0."""
        present = self.counts > 0
        w = np.zeros(len(self.counts))
        vals = self.counts[present]
        if np.all(vals == vals[0]):
            w[present] = 1.0
            return w
        inv = 1.0 / vals
        w[present] = present.sum() * inv / inv.sum()
        return w


def balanced_ce(logits, labels, counts: ClassCounts):
    """Cross-entropy reweighted by inverse class frequency.

    loss = (1/B) sum_i w_{y_i} * CE_i, weights normalized to mean 1 over
    classes with nonzero count. Returns (loss, grad wrt logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    if logits.shape[1] != len(counts.counts):
        raise ShapeError(
            f"{logits.shape[1]} logit columns vs {len(counts.counts)} class counts"
        )
    if np.any(counts.counts[labels] == 0):
        raise CountError("a label belongs to a class with zero count")
    b = logits.shape[0]
    w = counts.weights()[labels]
    logp = log_softmax(logits)
    ce = -logp[np.arange(b), labels]
    loss = float((w * ce).mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad *= (w / b)[:, None]
    return loss, grad


@dataclass
class KDConfig:
    kd_temperature: float = 2.0
    kd_weight: float = 0.5

    def __post_init__(self):
        if self.kd_temperature <= 0:
            raise ValueError(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError(f"kd_weight must be in [0, 1], got {self.kd_weight}")


def kd_loss(student_logits, teacher_logits, cfg: KDConfig):
    """Distillation loss T^2 * mean_i KL(teacher_i || student_i) at
    temperature T. Returns (loss, grad wrt student logits)."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise ShapeError(f"logit shapes differ: {s.shape} vs {t.shape}")
    temp = cfg.kd_temperature
    b = s.shape[0]
    logp = log_softmax(t / temp)
    logq = log_softmax(s / temp)
    p = np.exp(logp)
    loss = float(temp * temp * (p * (logp - logq)).sum() / b)
    grad = temp / b * (np.exp(logq) - p)
    return loss, grad


def combined_weak_stage_loss(balanced: float, kd: float, kd_weight: float) -> float:
    """Weak-stage objective: (1 - w) * balanced CE + w * KD."""
    out = (1.0 - kd_weight) * balanced + kd_weight * kd
    if not np.isfinite(out):
        raise FloatingPointError("combined loss is not finite")
    return float(out)
