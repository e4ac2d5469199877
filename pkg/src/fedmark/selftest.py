"""Built-in oracle suite: quick independent checks of the numeric core.

Each check recomputes its expected value from a definition-level
implementation (brute-force enumeration, finite differences, hand
arithmetic) rather than calling back into the code it verifies. The CLI
`selftest` subcommand runs these and reports one line per check.
"""

import math

import numpy as np

from . import nn
from .losses import (
    ClassCounts,
    FusedFeatureSet,
    KDConfig,
    balanced_ce,
    contrastive_fusion_loss,
    cross_entropy,
    kd_loss,
)
from .netsim import Band, PipelineSpec, pipeline_throughput, select_band, transmission_time
from .protocol import fedavg_nets
from .stats import f_cdf, oneway_anova
from .weak_labels import permutation_ce_loss


def _finite_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        hi = f(x)
        x[i] = orig - h
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * h)
        it.iternext()
    return g


def _rel_err(analytic, numeric):
    scale = max(1.0, float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def _brute_force_conf_loss(v, src, tau):
    total = 0.0
    s_n = len(v)
    for s in range(s_n):
        pos = [p for p in range(s_n) if p != s and src[p] == src[s]]
        for p in pos:
            denom = sum(math.exp(float(v[s] @ v[a]) / tau) for a in range(s_n) if a != s)
            total += (-1.0 / len(pos)) * math.log(math.exp(float(v[s] @ v[p]) / tau) / denom)
    return total


def checks():
    rng = np.random.default_rng(20240817)

    # Eq-style contrastive loss vs brute-force triple sum
    v = nn.l2_normalize(rng.normal(size=(6, 4)))
    src = np.repeat(np.arange(3), 2)
    loss, _ = contrastive_fusion_loss(FusedFeatureSet(v, src, 2), 0.1)
    yield "contrastive brute-force", abs(loss - _brute_force_conf_loss(v, src, 0.1)) < 1e-9

    # symmetric case: 4 identical views -> 4 ln 3
    ident = np.tile(nn.l2_normalize(rng.normal(size=(1, 4))), (4, 1))
    loss, _ = contrastive_fusion_loss(FusedFeatureSet(ident, np.repeat([0, 1], 2), 2), 0.1)
    yield "contrastive symmetric 4ln3", abs(loss - 4 * math.log(3)) < 1e-9

    # gradient checks against central differences
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(4, size=5)
    _, g = cross_entropy(logits, labels)
    fd = _finite_difference(lambda x: cross_entropy(x, labels)[0], logits.copy())
    yield "cross-entropy gradient", _rel_err(g, fd) < 1e-4

    counts = ClassCounts(rng.integers(1, 9, size=4))
    _, g = balanced_ce(logits, labels, counts)
    fd = _finite_difference(lambda x: balanced_ce(x, labels, counts)[0], logits.copy())
    yield "balanced-CE gradient", _rel_err(g, fd) < 1e-4

    teacher = rng.normal(size=(5, 4))
    kcfg = KDConfig(2.0, 0.5)
    _, g = kd_loss(logits, teacher, kcfg)
    fd = _finite_difference(lambda x: kd_loss(x, teacher, kcfg)[0], logits.copy())
    yield "distillation gradient", _rel_err(g, fd) < 1e-4

    # permutation loss: exhaustive minimum and budget path agree
    multiset = [0, 1, 1, 2]
    best, _, _ = permutation_ce_loss(logits[:4], multiset, 64, rng)
    import itertools
    logp = logits[:4] - np.log(np.exp(logits[:4]).sum(axis=1, keepdims=True))
    brute = min(
        -np.mean([logp[i, p[i]] for i in range(4)])
        for p in itertools.permutations(multiset)
    )
    yield "permutation-CE exhaustive min", abs(best - brute) < 1e-12

    # modality-wise FedAvg hand example
    mk = lambda w: nn.DenseNet([nn.DenseLayer(np.array([[w[0]], [w[1]]]), np.zeros(1))])
    avg = fedavg_nets([(mk([0.0, 2.0]), 1), (mk([4.0, 6.0]), 3)])
    yield "fedavg hand example", np.allclose(avg.layers[0].weight.ravel(), [3.0, 5.0], atol=1e-15)

    # statistics kernels
    yield "f_cdf(3,2,6)=0.875", abs(f_cdf(3.0, 2, 6) - 0.875) < 1e-10
    res = oneway_anova([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    yield "anova hand example", abs(res.f - 3.0) < 1e-12 and abs(res.p_value - 0.125) < 1e-9

    # network formulas
    yield "75MB at 6Mbps = 100s", transmission_time(75e6, 6.0) == 100.0
    bands = (Band("B3", 21.0, 18.0), Band("B40", 6.0, 20.0))
    yield "band selection", (
        select_band("upload", bands).name == "B3"
        and select_band("download", bands).name == "B40"
    )
    spec = PipelineSpec(0.05, {"depth": 0.03, "radar": 0.02, "audio": 0.01}, 0.1058)
    yield "pipeline 9.45 FPS", abs(pipeline_throughput(spec) - 9.45) < 0.01


def run(print_fn=print) -> int:
    """Run all checks; returns the number of failures."""
    failures = 0
    for name, ok in checks():
        print_fn(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    return failures
