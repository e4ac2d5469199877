"""Statistics kernels for the biomarker analysis: F-distribution CDF via
the regularized incomplete beta function, Box-Cox fitting by grid-search
MLE, the Brown-Forsythe variance test, and one-way ANOVA."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError, ParameterError, UndefinedStatisticError

_BETACF_MAX_ITER = 300
_BETACF_EPS = 3e-16
_BETACF_FPMIN = 1e-300


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETACF_FPMIN:
        d = _BETACF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETACF_FPMIN:
            d = _BETACF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _BETACF_FPMIN:
            c = _BETACF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise FloatingPointError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x) -> float:
    """I_x(a, b), absolute error below 1e-10 for moderate a, b."""
    if a <= 0 or b <= 0:
        raise ParameterError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def f_cdf(x, d1, d2) -> float:
    """CDF of the F distribution with (d1, d2) degrees of freedom."""
    if d1 < 1 or d2 < 1:
        raise ParameterError(f"degrees of freedom must be >= 1, got ({d1}, {d2})")
    if x < 0:
        raise ParameterError("F statistic must be nonnegative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    z = d1 * x / (d1 * x + d2)
    return regularized_incomplete_beta(d1 / 2.0, d2 / 2.0, z)


# ---------------------------------------------------------------------------
# Box-Cox

BOXCOX_SHIFT_EPS = 1e-6
BOXCOX_GRID = np.linspace(-5.0, 5.0, 1001)  # step 0.01


@dataclass(frozen=True)
class BoxCoxFit:
    lam: float
    shift: float
    log_likelihood: float


def _boxcox_transform(x, lam):
    if lam == 0.0:
        return np.log(x)
    return (np.power(x, lam) - 1.0) / lam


def boxcox_fit(xs) -> BoxCoxFit:
    """Pick the power-transform exponent by maximum likelihood on the grid
    [-5, 5] step 0.01. Nonpositive inputs are shifted just above zero."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 1 or len(xs) < 3:
        raise DataError(f"need at least 3 observations, got shape {xs.shape}")
    if np.all(xs == xs[0]):
        raise DegenerateInputError("constant input; transform exponent undefined")
    shift = max(0.0, BOXCOX_SHIFT_EPS - float(xs.min()))
    z = xs + shift
    log_z_sum = float(np.log(z).sum())
    n = len(z)
    best_lam, best_ll = None, -np.inf
    for lam in BOXCOX_GRID:
        y = _boxcox_transform(z, float(lam))
        var = float(y.var())
        if var <= 0.0 or not np.isfinite(var):
            continue
        ll = -0.5 * n * math.log(var) + (lam - 1.0) * log_z_sum
        if ll > best_ll:
            best_lam, best_ll = float(lam), ll
    if best_lam is None:
        raise DegenerateInputError("no transform exponent gave a finite likelihood")
    return BoxCoxFit(best_lam, shift, best_ll)


def boxcox_apply(xs, fit: BoxCoxFit) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    z = xs + fit.shift
    if np.any(z <= 0.0):
        raise DegenerateInputError("shifted inputs must be positive")
    return _boxcox_transform(z, fit.lam)


# ---------------------------------------------------------------------------
# group tests

@dataclass(frozen=True)
class AnovaResult:
    f: float
    df_between: int
    df_within: int
    p_value: float


@dataclass(frozen=True)
class LeveneResult:
    w: float
    p_value: float
    center: str = "median"


def _check_groups(groups):
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise DataError("need at least 2 groups")
    for g in groups:
        if g.ndim != 1 or len(g) < 2:
            raise DataError("every group needs at least 2 samples")
    return groups


def oneway_anova(groups) -> AnovaResult:
    """Classic one-way ANOVA: F = (SSB/df_b) / (SSW/df_w), p from the F CDF."""
    groups = _check_groups(groups)
    n = sum(len(g) for g in groups)
    k = len(groups)
    grand = sum(float(g.sum()) for g in groups) / n
    ssb = sum(len(g) * (float(g.mean()) - grand) ** 2 for g in groups)
    ssw = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    df_b, df_w = k - 1, n - k
    if ssw == 0.0:
        if ssb == 0.0:
            raise UndefinedStatisticError("zero variance within and between groups")
        return AnovaResult(math.inf, df_b, df_w, 0.0)
    f = (ssb / df_b) / (ssw / df_w)
    return AnovaResult(f, df_b, df_w, 1.0 - f_cdf(f, df_b, df_w))


def levene_test(groups) -> LeveneResult:
    """Brown-Forsythe variant: one-way ANOVA on absolute deviations from
    the group medians."""
    groups = _check_groups(groups)
    deviations = [np.abs(g - np.median(g)) for g in groups]
    try:
        res = oneway_anova(deviations)
    except UndefinedStatisticError:
        # all deviations identical: variances are trivially equal
        return LeveneResult(0.0, 1.0)
    if math.isinf(res.f):
        return LeveneResult(math.inf, 0.0)
    return LeveneResult(res.f, res.p_value)


def select_critical(p_values, alpha=0.05):
    """Features whose p-value is strictly below alpha. NaN p-values (from
    degenerate features) never qualify."""
    out = set()
    for name, p in p_values.items():
        if p is not None and not math.isnan(p) and p < alpha:
            out.add(name)
    return out
