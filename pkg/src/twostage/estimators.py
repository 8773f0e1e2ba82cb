"""Point and variance estimation for two-stage designs.

Totals are estimated by the Horvitz-Thompson estimator under SI or Bernoulli
sampling of PSUs and by the Hansen-Hurwitz estimator under with-replacement
(SIR) sampling.  The draw-sequential form ``Y_hat = N_I * mean(Z_j)`` (with
Z_j the estimated subtotal of the PSU selected at the j-th draw) carries the
sample dispersion s_Z^2 that all s^2-based variance estimators reuse.

Variance estimators:

* ``UNBIASED``           v      = (N^2/n) { (1-f) s_Z^2 + mean_S(V_hat_i) }
* ``SIMPLIFIED``         v_SIMP = (N^2/n) (1-f) s_Z^2
* ``WITH_REPLACEMENT``   v_WR   = (N^2/n) s_Z^2         (s_X^2 under SIR)
* ``BERNOULLI``          v_B    = (N^2/n) { (1-f)/n_B * sum_S Yhat_i^2
                                            + f/n_B * sum_S V_hat_i }, 0 if n_B=0

v_SIMP underestimates the design variance by exactly sum_U V_i and v_WR
overestimates it by N_I * S^2; both are attractive when no unbiased
within-PSU variance estimator exists (e.g. systematic subsampling).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .designs import DesignSpec, FirstStageDraw
from .frame import Frame

__all__ = [
    "PsuEstimate",
    "TotalEstimate",
    "VARIANCE_METHODS",
    "ht_total_si",
    "ht_total_be",
    "hh_total_sir",
    "variance_estimate",
    "theoretical_variance",
    "si_second_stage_variances",
    "TotalEstimand",
    "RatioEstimand",
    "CorrelationEstimand",
    "ProportionEstimand",
    "plugin_estimate",
    "population_value",
    "StratifiedClusterSample",
    "stratified_cluster_counts",
    "proportion_estimate",
    "linearized_values",
    "normal_quantile",
    "normal_ci",
]

VARIANCE_METHODS = ("UNBIASED", "SIMPLIFIED", "WITH_REPLACEMENT", "BERNOULLI")


@dataclass
class PsuEstimate:
    """Estimated subtotal(s) for one selected PSU.

    ``v_hat`` is the unbiased within-PSU variance estimate when the second
    stage admits one (absent for systematic subsampling).
    """

    psu_index: int
    y_hat: np.ndarray
    v_hat: np.ndarray | None = None


def _as_estimate_arrays(
    est: Sequence[PsuEstimate] | tuple[np.ndarray, np.ndarray | None],
) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalize a list of PsuEstimate (or an (y_hat, v_hat) pair) to arrays."""
    if isinstance(est, tuple) and len(est) == 2:
        y, v = est
        return np.atleast_2d(np.asarray(y, dtype=np.float64)), (
            None if v is None else np.atleast_2d(np.asarray(v, dtype=np.float64))
        )
    y = np.vstack([np.atleast_1d(e.y_hat) for e in est])
    if any(e.v_hat is None for e in est):
        v = None
    else:
        v = np.vstack([np.atleast_1d(e.v_hat) for e in est])
    if v is not None and np.any(v < 0):
        raise ValueError("v_hat must be nonnegative")
    return y, v


@dataclass
class TotalEstimate:
    """A total estimate with its draw-sequential values.

    For SI and SIR, ``z_values`` holds Z_j / X_j in draw order and
    ``y_hat == N_I * mean(z_values)``; ``s2`` is their sample dispersion
    (ddof=1; nan when only one draw).  For BE, ``z_values`` holds the
    selected PSUs' estimates in frame order and the estimator divides by the
    *expected* size, so the mean identity does not apply; ``n_realized``
    records the random sample size.
    """

    y_hat: float
    method: str
    n_I: float
    N_I: int
    f_I: float
    z_values: np.ndarray
    s2: float
    v_hats: np.ndarray | None = None
    n_realized: int | None = None

    def __post_init__(self):
        if self.method in ("SI", "SIR") and self.z_values.size != int(self.n_I):
            raise ValueError("need one estimate per draw")


def _dispersion(values: np.ndarray) -> float:
    return float(np.var(values, ddof=1)) if values.size >= 2 else math.nan


def ht_total_si(
    draw: FirstStageDraw,
    est: Sequence[PsuEstimate] | tuple[np.ndarray, np.ndarray | None],
    var_index: int = 0,
) -> TotalEstimate:
    """Horvitz-Thompson total under SI sampling of PSUs: (N_I/n_I) sum_S Yhat_i."""
    if draw.design.kind != "SI":
        raise ValueError(f"expected an SI draw, got {draw.design.kind}")
    y, v = _as_estimate_arrays(est)
    if y.shape[0] != draw.n_drawn:
        raise ValueError("need one PSU estimate per selected PSU")
    z = y[:, var_index]
    n, N = draw.n_drawn, draw.n_population
    return TotalEstimate(
        y_hat=N * float(z.mean()),
        method="SI",
        n_I=n,
        N_I=N,
        f_I=n / N,
        z_values=z,
        s2=_dispersion(z),
        v_hats=None if v is None else v[:, var_index],
    )


def ht_total_be(
    draw: FirstStageDraw,
    est: Sequence[PsuEstimate] | tuple[np.ndarray, np.ndarray | None],
    var_index: int = 0,
) -> TotalEstimate:
    """Horvitz-Thompson total under Bernoulli sampling: divides by the expected size."""
    if draw.design.kind != "BE":
        raise ValueError(f"expected a BE draw, got {draw.design.kind}")
    n_expected = float(draw.design.expected_n_I)
    if draw.n_drawn == 0:
        z = np.empty(0)
        vhats = np.empty(0)
    else:
        y, v = _as_estimate_arrays(est)
        if y.shape[0] != draw.n_drawn:
            raise ValueError("need one PSU estimate per selected PSU")
        z = y[:, var_index]
        vhats = None if v is None else v[:, var_index]
    N = draw.n_population
    return TotalEstimate(
        y_hat=(N / n_expected) * float(z.sum()),
        method="BE",
        n_I=n_expected,
        N_I=N,
        f_I=n_expected / N,
        z_values=z,
        s2=_dispersion(z),
        v_hats=vhats,
        n_realized=draw.n_drawn,
    )


def hh_total_sir(
    draw: FirstStageDraw,
    est: Sequence[PsuEstimate] | tuple[np.ndarray, np.ndarray | None],
    var_index: int = 0,
) -> TotalEstimate:
    """Hansen-Hurwitz total under SIR sampling of PSUs.

    ``est`` holds one estimate per draw occurrence, aligned with
    ``draw.order``; a PSU selected W_i times contributes W_i independent
    second-stage estimates.
    """
    if draw.design.kind != "SIR":
        raise ValueError(f"expected an SIR draw, got {draw.design.kind}")
    y, v = _as_estimate_arrays(est)
    if y.shape[0] != draw.n_drawn:
        raise ValueError("need one PSU estimate per draw occurrence")
    x = y[:, var_index]
    n, N = draw.n_drawn, draw.n_population
    return TotalEstimate(
        y_hat=N * float(x.mean()),
        method="SIR",
        n_I=n,
        N_I=N,
        f_I=n / N,
        z_values=x,
        s2=_dispersion(x),
        v_hats=None if v is None else v[:, var_index],
    )


def variance_estimate(total: TotalEstimate, method: str) -> float:
    """Design-variance estimate for a total, by the requested method."""
    if method not in VARIANCE_METHODS:
        raise ValueError(f"unknown variance method: {method!r}")
    N, n, f = total.N_I, total.n_I, total.f_I

    if method == "BERNOULLI":
        if total.method != "BE":
            raise ValueError("BERNOULLI variance needs a BE total")
        n_b = total.n_realized
        if n_b == 0:
            return 0.0
        if total.v_hats is None:
            raise ValueError("BERNOULLI variance needs per-PSU v_hat estimates")
        term = (1.0 - f) / n_b * float(np.sum(total.z_values**2))
        term += f / n_b * float(np.sum(total.v_hats))
        return N**2 / n * term

    if total.method not in ("SI", "SIR"):
        raise ValueError(f"{method} variance needs an SI or SIR total")
    if total.n_I < 2:
        raise ValueError("sample dispersion undefined for n_I = 1")

    if method == "WITH_REPLACEMENT":
        return N**2 / n * total.s2
    if total.method != "SI":
        raise ValueError(f"{method} variance needs an SI total")
    if method == "SIMPLIFIED":
        return N**2 / n * (1.0 - f) * total.s2
    # UNBIASED
    if total.v_hats is None:
        raise ValueError("UNBIASED variance needs per-PSU v_hat estimates")
    return N**2 / n * ((1.0 - f) * total.s2 + float(np.mean(total.v_hats)))


def theoretical_variance(
    frame: Frame,
    design: DesignSpec,
    v_i: np.ndarray | None = None,
    var_index: int = 0,
    approximate: bool = False,
) -> float:
    """Closed-form design variance of the total estimator.

    ``v_i`` holds the exact second-stage variances per PSU (zeros for a
    census).  With ``approximate=True`` (SI only) returns the small-f_I
    approximation (N^2/n)(1-f){S^2 + mean(V_i)}.
    """
    sub = frame.subtotals[:, var_index]
    N = frame.n_psus
    v_i = np.zeros(N) if v_i is None else np.asarray(v_i, dtype=np.float64)
    if v_i.shape != (N,):
        raise ValueError("v_i must hold one value per PSU")
    mean_vi = float(v_i.mean())
    mu = float(sub.mean())

    if design.kind == "SI":
        n = design.n_I
        f = n / N
        s2 = float(np.sum((sub - mu) ** 2) / (N - 1))
        if approximate:
            return N**2 / n * (1.0 - f) * (s2 + mean_vi)
        return N**2 / n * ((1.0 - f) * s2 + mean_vi)
    if approximate:
        raise ValueError("the variance approximation applies to SI designs only")
    if design.kind == "SIR":
        n = design.n_I
        s2 = float(np.sum((sub - mu) ** 2) / (N - 1))
        return N**2 / n * ((N - 1) / N * s2 + mean_vi)
    if design.kind == "BE":
        n = float(design.expected_n_I)
        f = n / N
        return N**2 / n * ((1.0 - f) * float(np.mean(sub**2)) + mean_vi)
    raise ValueError(f"unsupported design kind: {design.kind!r}")


def si_second_stage_variances(frame: Frame, n0: int, var_index: int | None = None) -> np.ndarray:
    """Exact V_i for an SI second stage of size n0: (N_i^2/n0)(1 - n0/N_i) S_i^2."""
    sizes = frame.sizes.astype(np.float64)
    if np.any(frame.sizes < n0):
        raise ValueError("n0 exceeds the size of some PSU")
    s2 = frame.within_psu_variances
    if var_index is not None:
        s2 = s2[:, var_index]
        return sizes**2 / n0 * (1.0 - n0 / sizes) * s2
    return sizes[:, None] ** 2 / n0 * (1.0 - n0 / sizes[:, None]) * s2


# ---------------------------------------------------------------------------
# Smooth functions of totals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TotalEstimand:
    """theta = total of one variable (homogeneous of degree 1 in the totals)."""

    var: int

    degree = 1

    @property
    def label(self) -> str:
        return f"total[y{self.var + 1}]"

    def ssu_columns(self, values: np.ndarray) -> np.ndarray:
        return values[:, [self.var]]

    def evaluate(self, totals: np.ndarray) -> np.ndarray:
        totals = np.asarray(totals, dtype=np.float64)
        return totals[..., 0]


@dataclass(frozen=True)
class RatioEstimand:
    """theta = total(num) / total(den), e.g. a ratio of two population means."""

    num: int
    den: int

    degree = 0

    @property
    def label(self) -> str:
        return f"ratio[y{self.num + 1}/y{self.den + 1}]"

    def ssu_columns(self, values: np.ndarray) -> np.ndarray:
        return values[:, [self.num, self.den]]

    def evaluate(self, totals: np.ndarray) -> np.ndarray:
        totals = np.asarray(totals, dtype=np.float64)
        den = totals[..., 1]
        if np.any(den == 0):
            raise ZeroDivisionError("ratio denominator total is zero")
        return totals[..., 0] / den


@dataclass(frozen=True)
class CorrelationEstimand:
    """theta = finite-population correlation of two variables.

    Substitution estimator: every total in the population formula (sums of
    y_a, y_b, y_a^2, y_b^2, y_a*y_b and the population count) is replaced by
    its estimate.
    """

    a: int
    b: int

    degree = 0

    @property
    def label(self) -> str:
        return f"corr[y{self.a + 1},y{self.b + 1}]"

    def ssu_columns(self, values: np.ndarray) -> np.ndarray:
        ya, yb = values[:, self.a], values[:, self.b]
        return np.column_stack([ya, yb, ya**2, yb**2, ya * yb, np.ones_like(ya)])

    def evaluate(self, totals: np.ndarray) -> np.ndarray:
        totals = np.asarray(totals, dtype=np.float64)
        ta, tb, taa, tbb, tab, tn = (totals[..., j] for j in range(6))
        cov = tab - ta * tb / tn
        va = taa - ta**2 / tn
        vb = tbb - tb**2 / tn
        den2 = va * vb
        if np.any(den2 <= 0):
            raise ValueError("degenerate variance in correlation estimand")
        return cov / np.sqrt(den2)


@dataclass(frozen=True)
class ProportionEstimand:
    """theta = share of SSUs whose variable equals a category code."""

    var: int
    category: float

    degree = 0

    @property
    def label(self) -> str:
        return f"prop[y{self.var + 1}={self.category:g}]"

    def ssu_columns(self, values: np.ndarray) -> np.ndarray:
        ind = (values[:, self.var] == self.category).astype(np.float64)
        return np.column_stack([ind, np.ones_like(ind)])

    def evaluate(self, totals: np.ndarray) -> np.ndarray:
        totals = np.asarray(totals, dtype=np.float64)
        den = totals[..., 1]
        if np.any(den == 0):
            raise ZeroDivisionError("estimated population count is zero")
        return totals[..., 0] / den


SmoothEstimand = TotalEstimand | RatioEstimand | CorrelationEstimand | ProportionEstimand


def plugin_estimate(totals: np.ndarray, estimand: SmoothEstimand) -> float:
    """Substitution value of a smooth function at a vector of (estimated) totals."""
    value = estimand.evaluate(np.asarray(totals, dtype=np.float64))
    return float(value)


def population_value(frame: Frame, estimand: SmoothEstimand) -> float:
    """Exact population value of the estimand (plug-in at the true totals)."""
    cols = estimand.ssu_columns(frame.values)
    return plugin_estimate(cols.sum(axis=0), estimand)


# ---------------------------------------------------------------------------
# Stratified cluster sampling of PSUs: proportions and linearization
# ---------------------------------------------------------------------------


@dataclass
class StratifiedClusterSample:
    """Per-stratum category counts and PSU sizes from a stratified SI cluster sample.

    ``counts[l]`` holds Y_ic (members of category c) and ``sizes[l]`` holds
    N_i for every sampled PSU of stratum l; ``n_psus_population[l]`` is the
    stratum's PSU count N_Il in the frame.
    """

    labels: tuple[str, ...]
    n_psus_population: dict[str, int]
    counts: dict[str, np.ndarray]
    sizes: dict[str, np.ndarray]

    def weight(self, label: str) -> float:
        return self.n_psus_population[label] / self.counts[label].size


def stratified_cluster_counts(
    frame: Frame,
    draws: Mapping[str, FirstStageDraw],
    var_index: int,
    category: float,
) -> StratifiedClusterSample:
    """Observe a stratified cluster sample: censuses inside the selected PSUs."""
    groups = frame.stratum_psu_indices()
    ind = (frame.values[:, var_index] == category).astype(np.float64)
    cat_counts = np.add.reduceat(ind, frame.offsets[:-1])
    labels = tuple(draws.keys())
    counts: dict[str, np.ndarray] = {}
    sizes: dict[str, np.ndarray] = {}
    pop: dict[str, int] = {}
    for label in labels:
        sel = draws[label].order
        counts[label] = cat_counts[sel]
        sizes[label] = frame.sizes[sel].astype(np.float64)
        pop[label] = int(groups[label].size)
    return StratifiedClusterSample(labels, pop, counts, sizes)


def proportion_estimate(sample: StratifiedClusterSample) -> tuple[float, float]:
    """Substitution estimator p_hat = (stratified HT count) / N_hat."""
    num = den = 0.0
    for label in sample.labels:
        w = sample.weight(label)
        num += w * float(sample.counts[label].sum())
        den += w * float(sample.sizes[label].sum())
    if den == 0:
        raise ZeroDivisionError("estimated population count is zero")
    return num / den, den


def linearized_values(
    sample: StratifiedClusterSample,
) -> tuple[dict[str, np.ndarray], float, float, float]:
    """Linearized variable of the proportion and its with-replacement variance.

    E_i = (Y_ic - p_hat * N_i) / N_hat per sampled PSU, and

        v_STWR = sum_l (N_Il^2 / n_Il) * s_El^2,

    the stratified analog of v_WR applied to the E_i.  By construction the
    sample-weighted sum of the E_i is zero.  Raises when any stratum has a
    single sampled PSU (s_El^2 undefined).
    """
    p_hat, n_hat = proportion_estimate(sample)
    e_values: dict[str, np.ndarray] = {}
    v = 0.0
    for label in sample.labels:
        n_l = sample.counts[label].size
        if n_l < 2:
            raise ValueError(f"stratum {label!r} has a single sampled PSU")
        e = (sample.counts[label] - p_hat * sample.sizes[label]) / n_hat
        e_values[label] = e
        n_pop = sample.n_psus_population[label]
        v += n_pop**2 / n_l * float(np.var(e, ddof=1))
    return e_values, v, p_hat, n_hat


# ---------------------------------------------------------------------------
# Normal quantiles and normality-based confidence intervals
# ---------------------------------------------------------------------------

# Wichura's rational approximation of the standard normal inverse CDF
# (algorithm PPND16); absolute error below 1e-15, well inside the 1e-8
# contract used by the tests.
_PPND_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_PPND_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_PPND_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_PPND_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
    1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_PPND_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_PPND_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
    7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coef: tuple[float, ...], x: float) -> float:
    out = coef[-1]
    for c in reversed(coef[:-1]):
        out = out * x + c
    return out


def normal_quantile(p: float) -> float:
    """Standard normal quantile (inverse CDF)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_PPND_A, r) / _poly(_PPND_B, r)
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        value = _poly(_PPND_C, r) / _poly(_PPND_D, r)
    else:
        r -= 5.0
        value = _poly(_PPND_E, r) / _poly(_PPND_F, r)
    return -value if q < 0 else value


def normal_ci(y_hat: float, v: float, alpha: float) -> tuple[float, float]:
    """Symmetric normality-based interval with one-tailed error rate alpha.

    alpha = 0.5 is allowed and degenerates to a zero-width interval.
    """
    if v < 0:
        raise ValueError("variance estimate must be nonnegative")
    if not 0.0 < alpha <= 0.5:
        raise ValueError("alpha must be in (0, 0.5]")
    half = normal_quantile(1.0 - alpha) * math.sqrt(v)
    return y_hat - half, y_hat + half
