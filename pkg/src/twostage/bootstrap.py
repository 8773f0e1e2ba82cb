"""With-replacement bootstrap of PSUs and bootstrap confidence intervals.

Given the draw-sequential estimates Z_1..Z_n of an SI (or SIR) first stage,
each bootstrap replicate draws multinomial weights D ~ Mult(m; 1/n, ..)
and forms the resampled mean Zbar* = (1/m) sum_j D_j Z_j; plug-in statistics
are evaluated at the resampled totals N_I * Zbar*.  Confidence intervals:

* percentile:  [Q_alpha(theta*), Q_{1-alpha}(theta*)]
* Studentized: [theta - u*_{1-alpha} se, theta - u*_alpha se] where u* are
  quantiles of the replicate pivots t*_r = (theta*_r - theta) / se*_r and
  se is a chosen standard error of theta.

For totals the within-replicate standard error reduces to
sqrt(N_I^2 s*_Z^2 / m); for smooth functions of totals it extrapolates by
linearization at the replicate's resampled totals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import (
    SmoothEstimand,
    StratifiedClusterSample,
    TotalEstimand,
    proportion_estimate,
)
from .rng import substream

__all__ = [
    "BootstrapConfig",
    "ReplicateSet",
    "multinomial_weights",
    "resample_wr",
    "replicate_se",
    "bootstrap_variance",
    "percentile_ci",
    "studentized_ci",
    "stratified_proportion_resample",
]


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings: R replicates of m with-replacement PSU draws.

    ``m=None`` resamples one fewer PSU than were drawn (m = n - 1, floor 2),
    the classical choice that makes the bootstrap variance of a total
    conditionally unbiased for v_WR.
    """

    replicates: int = 1000
    m: int | None = None
    alpha: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 50:
            raise ValueError("need at least 50 bootstrap replicates")
        if self.m is not None and self.m < 2:
            raise ValueError("resample size m must be >= 2")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must be in (0, 0.5)")

    def resolve_m(self, n_draws: int) -> int:
        return self.m if self.m is not None else max(2, n_draws - 1)


@dataclass
class ReplicateSet:
    """Replicate plug-in values theta*_r, the base estimate, and optional se*_r."""

    theta_star: np.ndarray
    base: float
    m: int
    n_draws: int
    se_star: np.ndarray | None = None


def multinomial_weights(rng: np.random.Generator, replicates: int, n: int, m: int) -> np.ndarray:
    """(R, n) matrix of resampling weights, one multinomial row per replicate."""
    return rng.multinomial(m, np.full(n, 1.0 / n), size=replicates).astype(np.float64)


def _numeric_gradient(estimand: SmoothEstimand, totals: np.ndarray) -> np.ndarray:
    """Central-difference gradient of the plug-in map at each replicate's totals."""
    r, p = totals.shape
    grad = np.empty((r, p))
    step = 1e-6 * np.maximum(np.abs(totals), 1.0)
    for d in range(p):
        hi = totals.copy()
        lo = totals.copy()
        hi[:, d] += step[:, d]
        lo[:, d] -= step[:, d]
        grad[:, d] = (estimand.evaluate(hi) - estimand.evaluate(lo)) / (2.0 * step[:, d])
    return grad


def resample_wr(
    z_values: np.ndarray,
    n_population: int,
    cfg: BootstrapConfig,
    estimand: SmoothEstimand | None = None,
    rng: np.random.Generator | None = None,
    compute_se: bool = False,
) -> ReplicateSet:
    """With-replacement bootstrap of the per-draw PSU estimates.

    ``z_values`` has one row per first-stage draw; its columns must match
    the estimand's totals convention (a single column for a total).  All
    replicates are generated from one substream of ``cfg.seed``, so the
    result is a pure function of (z_values, cfg).
    """
    z = np.asarray(z_values, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n < 2:
        raise ValueError("bootstrap needs at least 2 first-stage draws")
    m = cfg.resolve_m(n)
    estimand = estimand if estimand is not None else TotalEstimand(0)
    rng = rng if rng is not None else substream(cfg.seed, "bootstrap")

    d_mat = multinomial_weights(rng, cfg.replicates, n, m)
    totals_star = (d_mat @ z) * (n_population / m)  # (R, p)
    theta_star = np.asarray(estimand.evaluate(totals_star), dtype=np.float64)
    base = float(estimand.evaluate(n_population * z.mean(axis=0)[None, :])[0])

    se_star = replicate_se(d_mat, z, totals_star, n_population, m, estimand) if compute_se else None
    return ReplicateSet(theta_star, base, m, n, se_star)


def replicate_se(
    d_mat: np.ndarray,
    z: np.ndarray,
    totals_star: np.ndarray,
    n_population: int,
    m: int,
    estimand: SmoothEstimand,
) -> np.ndarray:
    """Within-replicate standard errors of the plug-in values.

    The covariance of the resampled totals is N^2/m * S*, with S* the
    D-weighted covariance of the z rows around Zbar* (ddof m-1); for smooth
    functions it is mapped through the gradient at the replicate's totals
    (for a total this reduces to sqrt(N^2 s*_Z^2 / m)).
    """
    zbar_star = totals_star / n_population  # (R, p)
    p = z.shape[1]
    if p == 1 and estimand.degree == 1:
        m2 = d_mat @ (z[:, 0] ** 2)
        s2 = (m2 - m * zbar_star[:, 0] ** 2) / (m - 1)
        var_theta = n_population**2 * s2 / m
    else:
        cross = z[:, :, None] * z[:, None, :]  # (n, p, p)
        m2 = np.tensordot(d_mat, cross, axes=(1, 0))  # (R, p, p)
        cov = (m2 - m * zbar_star[:, :, None] * zbar_star[:, None, :]) / (m - 1)
        cov *= n_population**2 / m
        grad = _numeric_gradient(estimand, totals_star)
        var_theta = np.einsum("rp,rpq,rq->r", grad, cov, grad)
    return np.sqrt(np.maximum(var_theta, 0.0))


def bootstrap_variance(reps: ReplicateSet) -> float:
    """Sample variance of the replicate plug-in values."""
    if reps.theta_star.size < 2:
        raise ValueError("need at least 2 replicates")
    return float(np.var(reps.theta_star, ddof=1))


def percentile_ci(reps: ReplicateSet, alpha: float) -> tuple[float, float]:
    """Percentile bootstrap interval from the replicate distribution."""
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be in (0, 0.5)")
    if reps.theta_star.size < math.ceil(1.0 / alpha):
        raise ValueError("not enough replicates for the requested tail probability")
    lo, hi = np.quantile(reps.theta_star, [alpha, 1.0 - alpha])  # type-7 interpolation
    return float(lo), float(hi)


def studentized_ci(reps: ReplicateSet, base_se: float, alpha: float) -> tuple[float, float]:
    """Studentized bootstrap interval using the replicate pivots.

    The pivot quantiles replace the normal quantiles in the usual interval:
    [theta - u*_{1-alpha} base_se, theta - u*_alpha base_se].
    """
    if reps.se_star is None:
        raise ValueError("replicates carry no within-replicate standard errors")
    if not np.all(reps.se_star > 0):
        raise ValueError("every replicate standard error must be positive")
    if not base_se > 0:
        raise ValueError("base_se must be positive")
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be in (0, 0.5)")
    t = (reps.theta_star - reps.base) / reps.se_star
    u_lo, u_hi = np.quantile(t, [alpha, 1.0 - alpha])
    return float(reps.base - u_hi * base_se), float(reps.base - u_lo * base_se)


def stratified_proportion_resample(
    sample: StratifiedClusterSample,
    cfg: BootstrapConfig,
    rng: np.random.Generator | None = None,
    compute_se: bool = True,
) -> ReplicateSet:
    """Stratified with-replacement bootstrap of PSUs for a proportion.

    Resamples m_l PSUs with replacement independently within every stratum
    (m_l = n_Il - 1 by default, ``cfg.m`` overrides a common value), with
    shared multinomial weights across the numerator and denominator of the
    substitution estimator.  ``se_star`` recomputes the stratified
    with-replacement linearization variance on each replicate's resampled
    values, which feeds the Studentized interval.
    """
    rng = rng if rng is not None else substream(cfg.seed, "bootstrap")
    r = cfg.replicates
    p_hat, _ = proportion_estimate(sample)

    d_mats: dict[str, np.ndarray] = {}
    m_by_label: dict[str, int] = {}
    num = np.zeros(r)
    den = np.zeros(r)
    for label in sample.labels:
        counts = sample.counts[label]
        sizes = sample.sizes[label]
        n_l = counts.size
        if n_l < 2:
            raise ValueError(f"stratum {label!r} has a single sampled PSU")
        m_l = cfg.resolve_m(n_l)
        w_l = sample.n_psus_population[label] / m_l
        d_l = multinomial_weights(rng, r, n_l, m_l)
        d_mats[label] = d_l
        m_by_label[label] = m_l
        num += w_l * (d_l @ counts)
        den += w_l * (d_l @ sizes)
    theta_star = num / den

    se_star = None
    if compute_se:
        v_star = np.zeros(r)
        for label in sample.labels:
            counts = sample.counts[label]
            sizes = sample.sizes[label]
            m_l = m_by_label[label]
            d_l = d_mats[label]
            e = (counts[None, :] - theta_star[:, None] * sizes[None, :]) / den[:, None]
            mean_e = (d_l * e).sum(axis=1) / m_l
            m2 = (d_l * e**2).sum(axis=1)
            s2 = (m2 - m_l * mean_e**2) / (m_l - 1)
            v_star += sample.n_psus_population[label] ** 2 / m_l * s2
        se_star = np.sqrt(np.maximum(v_star, 0.0))
    n_total = sum(sample.counts[label].size for label in sample.labels)
    return ReplicateSet(theta_star, p_hat, n_total, n_total, se_star)
