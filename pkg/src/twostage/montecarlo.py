"""Monte Carlo harness: relative bias/stability and tail coverage of estimators.

A :class:`Scenario` fixes a two-stage design and a set of estimands; the
runner draws B independent two-stage samples, evaluates the point estimator,
the requested variance estimators and confidence intervals on each, and
summarizes them against reference values:

* percent relative bias   RB = 100 * (mean(est) - theta) / theta
* percent relative stability  RS = 100 * sqrt(mean((est - theta)^2)) / theta
* one-tailed error rates L (interval entirely above theta) and U (entirely
  below), in percent.

For variance estimators the reference is the "true" design variance,
approximated from a separate run of C independent samples unless supplied
in closed form.  Replicate b derives all of its randomness from the
substream (seed, ..., "mc", b), so reports are bit-identical for any number
of worker processes.
"""
from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bootstrap import (
    BootstrapConfig,
    multinomial_weights,
    replicate_se,
    stratified_proportion_resample,
)
from .designs import DesignSpec, psu_subtotal_estimates, si_order
from .estimators import (
    ProportionEstimand,
    SmoothEstimand,
    StratifiedClusterSample,
    TotalEstimand,
    linearized_values,
    normal_ci,
    population_value,
    proportion_estimate,
)
from .frame import Frame
from .rng import substream

__all__ = [
    "Scenario",
    "MCReport",
    "run_scenario",
    "approximate_true_variance",
    "coverage_stats",
    "scaling_study",
    "anderson_darling_normal",
    "normality_screen",
    "NormalityScreen",
]

STRAT_WR = "STRAT_WR"

_SI_VARIANCE_METHODS = ("UNBIASED", "SIMPLIFIED", "WITH_REPLACEMENT")

_FAMILY = {
    "UNBIASED": "v_unb",
    "SIMPLIFIED": "v_simp",
    "WITH_REPLACEMENT": "v_wr",
    STRAT_WR: "v_stwr",
}


@dataclass
class Scenario:
    """One simulation cell: design, estimands, estimators to evaluate."""

    first_stage: DesignSpec
    second_stage: str = "CENSUS"  # "SI" | "SYSTEMATIC" | "CENSUS"
    n0: int | None = None
    estimands: tuple[SmoothEstimand, ...] = (TotalEstimand(0),)
    variance_methods: tuple[str, ...] = ()
    bootstrap: BootstrapConfig | None = None
    studentized: bool = False
    ci_alpha: float = 0.025
    replicates: int = 1000
    true_run: int = 20000

    def validate(self, frame: Frame) -> None:
        if self.replicates < 100:
            raise ValueError("need at least 100 Monte Carlo replicates")
        if not self.estimands:
            raise ValueError("scenario needs at least one estimand")
        if self.second_stage == "CENSUS":
            if self.n0 is not None:
                raise ValueError("a census second stage takes no n0")
        else:
            if self.n0 is None or self.n0 < 1:
                raise ValueError(f"second stage {self.second_stage} needs n0 >= 1")
            if np.any(frame.sizes < self.n0):
                raise ValueError("n0 exceeds the smallest PSU size")
        kind = self.first_stage.kind
        if kind == "SI":
            self.first_stage.validate_for(frame.n_psus)
            bad = set(self.variance_methods) - set(_SI_VARIANCE_METHODS)
            if bad:
                raise ValueError(f"variance methods {sorted(bad)} unavailable under SI")
            if "UNBIASED" in self.variance_methods and self.second_stage == "SYSTEMATIC":
                raise ValueError(
                    "UNBIASED variance needs within-PSU variance estimates, "
                    "which systematic subsampling does not provide"
                )
        elif kind == "STRAT_SI":
            groups = frame.stratum_psu_indices()
            self.first_stage.validate_for(
                frame.n_psus, {k: v.size for k, v in groups.items()}
            )
            if set(self.variance_methods) - {STRAT_WR}:
                raise ValueError("stratified scenarios support the STRAT_WR method only")
            if self.second_stage != "CENSUS":
                raise ValueError("stratified cluster scenarios use a census second stage")
            if not all(isinstance(e, ProportionEstimand) for e in self.estimands):
                raise ValueError("stratified scenarios estimate proportions")
        else:
            raise ValueError(f"scenario first stage must be SI or STRAT_SI, got {kind}")
        if self.studentized:
            if self.bootstrap is None:
                raise ValueError("Studentized intervals need a bootstrap configuration")
            base = "SIMPLIFIED" if kind == "SI" else STRAT_WR
            if base not in self.variance_methods:
                raise ValueError(
                    f"Studentized intervals use the {base} variance as base standard error"
                )


@dataclass
class MCReport:
    """Summary of one (estimand, estimator family) pair over the MC replicates."""

    estimand: str
    family: str
    kind: str  # "point" | "variance" | "ci"
    theta_true: float
    n_replicates: int
    rb: float | None = None
    rb_se: float | None = None
    rs: float | None = None
    rs_se: float | None = None
    lower_pct: float | None = None
    upper_pct: float | None = None
    tail_se: float | None = None
    mean_estimate: float | None = None
    mean_se: float | None = None

    def metric_rows(self) -> list[tuple[str, float, float]]:
        """(metric, value, mc_se) rows for the long CSV format."""
        rows: list[tuple[str, float, float]] = []
        if self.kind in ("point", "variance"):
            rows.append((f"{self.family}.rb", self.rb, self.rb_se))
            rows.append((f"{self.family}.rs", self.rs, self.rs_se))
        else:
            p2 = min((self.lower_pct + self.upper_pct) / 100.0, 1.0)
            two_sided_se = 100.0 * math.sqrt(max(p2 * (1.0 - p2), 1e-12) / self.n_replicates)
            rows.append((f"{self.family}.L", self.lower_pct, self.tail_se))
            rows.append((f"{self.family}.U", self.upper_pct, self.tail_se))
            rows.append(
                (f"{self.family}.two_sided", self.lower_pct + self.upper_pct, two_sided_se)
            )
        return rows


def coverage_stats(
    lower: np.ndarray, upper: np.ndarray, theta: float
) -> tuple[float, float]:
    """Tail miss percentages: L = % of intervals entirely above theta, U = below."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if lower.size < 100:
        raise ValueError("need at least 100 replicate intervals")
    n = lower.size
    miss_low = float(np.count_nonzero(lower > theta)) / n
    miss_high = float(np.count_nonzero(upper < theta)) / n
    return 100.0 * miss_low, 100.0 * miss_high


# ---------------------------------------------------------------------------
# replicate engine
# ---------------------------------------------------------------------------


@dataclass
class _Context:
    frame: Frame
    scenario: Scenario
    seed: int
    tag: tuple
    columns: np.ndarray | None  # (N, p_total) derived SSU matrix (SI scenarios)
    col_subtotals: np.ndarray | None  # (N_I, p_total) exact subtotals
    slices: list[slice]
    total_vars: list[int | None]  # column of each TotalEstimand within its slice
    slots: dict[tuple, int]
    n_slots: int
    # stratified scenarios
    groups: dict[str, np.ndarray] | None = None
    cat_counts: np.ndarray | None = None
    need_vhat: bool = False

    def rng_for(self, b: int, purpose: str) -> np.random.Generator:
        return substream(self.seed, *self.tag, purpose, b)


def _build_context(frame: Frame, scenario: Scenario, seed: int, tag: tuple) -> _Context:
    scenario.validate(frame)
    est = scenario.estimands
    slots: dict[tuple, int] = {}

    def add(key: tuple) -> None:
        slots[key] = len(slots)

    # variance methods (and the Studentized base) apply to totals under SI
    # and to the proportion under STRAT_SI; other estimands are bootstrap-only
    if scenario.first_stage.kind == "SI":
        vm_kind: tuple = (TotalEstimand,)
    else:
        vm_kind = (ProportionEstimand,)
    for e in est:
        add(("point", e.label))
    for e in est:
        if isinstance(e, vm_kind):
            for vm in scenario.variance_methods:
                add(("var", e.label, vm))
                add(("ci", e.label, f"ci_normal_{_FAMILY[vm][2:]}", "lo"))
                add(("ci", e.label, f"ci_normal_{_FAMILY[vm][2:]}", "hi"))
    if scenario.bootstrap is not None:
        for e in est:
            add(("bootvar", e.label))
            add(("ci", e.label, "ci_percentile", "lo"))
            add(("ci", e.label, "ci_percentile", "hi"))
            if scenario.studentized and isinstance(e, vm_kind):
                add(("ci", e.label, "ci_studentized", "lo"))
                add(("ci", e.label, "ci_studentized", "hi"))

    if scenario.first_stage.kind == "SI":
        blocks = [e.ssu_columns(frame.values) for e in est]
        widths = [b.shape[1] for b in blocks]
        starts = np.concatenate(([0], np.cumsum(widths)))
        slices = [slice(int(starts[i]), int(starts[i + 1])) for i in range(len(est))]
        columns = np.ascontiguousarray(np.hstack(blocks))
        col_subtotals = np.add.reduceat(columns, frame.offsets[:-1], axis=0)
        return _Context(
            frame, scenario, seed, tag, columns, col_subtotals, slices,
            [0 if isinstance(e, TotalEstimand) else None for e in est],
            slots, len(slots),
            need_vhat="UNBIASED" in scenario.variance_methods,
        )

    # stratified proportion pipeline
    if len(est) != 1:
        raise ValueError("stratified scenarios run one proportion estimand at a time")
    groups = frame.stratum_psu_indices()
    e0 = est[0]
    ind = (frame.values[:, e0.var] == e0.category).astype(np.float64)
    cat_counts = np.add.reduceat(ind, frame.offsets[:-1])
    return _Context(
        frame, scenario, seed, tag, None, None, [slice(0, 2)], [None], slots, len(slots),
        groups=groups, cat_counts=cat_counts,
    )


def _draw_si_estimates(ctx: _Context, rng: np.random.Generator):
    """One SI first-stage draw; returns (yhat (n,p), vhat (n,p)|None)."""
    sc = ctx.scenario
    n = sc.first_stage.n_I
    sel = si_order(ctx.frame.n_psus, n, rng)
    if sc.second_stage == "CENSUS":
        yhat = ctx.col_subtotals[sel]
        vhat = np.zeros_like(yhat) if ctx.need_vhat else None
    else:
        yhat, vhat = psu_subtotal_estimates(
            ctx.frame, ctx.columns, sel, sc.second_stage, sc.n0, rng,
            with_vhat=ctx.need_vhat,
        )
    return yhat, vhat


def _si_replicate_row(ctx: _Context, rng: np.random.Generator, row: np.ndarray) -> None:
    sc = ctx.scenario
    frame = ctx.frame
    n = sc.first_stage.n_I
    N = frame.n_psus
    f = n / N
    yhat, vhat = _draw_si_estimates(ctx, rng)
    totals = N * yhat.mean(axis=0)

    for e, sl, tv in zip(sc.estimands, ctx.slices, ctx.total_vars):
        theta = float(e.evaluate(totals[None, sl])[0])
        row[ctx.slots[("point", e.label)]] = theta
        if tv is not None and sc.variance_methods:
            z = yhat[:, sl][:, tv]
            s2 = float(np.var(z, ddof=1))
            for vm in sc.variance_methods:
                if vm == "SIMPLIFIED":
                    v = N**2 / n * (1.0 - f) * s2
                elif vm == "WITH_REPLACEMENT":
                    v = N**2 / n * s2
                else:  # UNBIASED
                    v = N**2 / n * ((1.0 - f) * s2 + float(vhat[:, sl][:, tv].mean()))
                row[ctx.slots[("var", e.label, vm)]] = v
                lo, hi = normal_ci(theta, v, sc.ci_alpha)
                fam = f"ci_normal_{_FAMILY[vm][2:]}"
                row[ctx.slots[("ci", e.label, fam, "lo")]] = lo
                row[ctx.slots[("ci", e.label, fam, "hi")]] = hi

    if sc.bootstrap is None:
        return
    cfg = sc.bootstrap
    m = cfg.resolve_m(n)
    d_mat = multinomial_weights(rng, cfg.replicates, n, m)
    totals_star = (d_mat @ yhat) * (N / m)  # (R, p_total)
    for e, sl in zip(sc.estimands, ctx.slices):
        theta = row[ctx.slots[("point", e.label)]]
        theta_star = np.asarray(e.evaluate(totals_star[:, sl]), dtype=np.float64)
        row[ctx.slots[("bootvar", e.label)]] = float(np.var(theta_star, ddof=1))
        lo, hi = np.quantile(theta_star, [cfg.alpha, 1.0 - cfg.alpha])
        row[ctx.slots[("ci", e.label, "ci_percentile", "lo")]] = lo
        row[ctx.slots[("ci", e.label, "ci_percentile", "hi")]] = hi
        if sc.studentized and ("ci", e.label, "ci_studentized", "lo") in ctx.slots:
            se_star = replicate_se(d_mat, yhat[:, sl], totals_star[:, sl], N, m, e)
            base_se = math.sqrt(row[ctx.slots[("var", e.label, "SIMPLIFIED")]])
            u_lo, u_hi = _pivot_quantiles(theta_star, theta, se_star, cfg.alpha)
            row[ctx.slots[("ci", e.label, "ci_studentized", "lo")]] = theta - u_hi * base_se
            row[ctx.slots[("ci", e.label, "ci_studentized", "hi")]] = theta - u_lo * base_se


def _pivot_quantiles(
    theta_star: np.ndarray, theta: float, se_star: np.ndarray, alpha: float
) -> tuple[float, float]:
    """Quantiles of the Studentized pivots, dropping zero-dispersion replicates.

    A replicate that resampled a single distinct PSU has se* = 0 and carries
    no pivot information; such replicates are vanishingly rare for n >= 20.
    """
    valid = se_star > 0
    if not np.all(valid):
        if not np.any(valid):
            raise ValueError("every bootstrap replicate is degenerate")
        theta_star = theta_star[valid]
        se_star = se_star[valid]
    t = (theta_star - theta) / se_star
    u_lo, u_hi = np.quantile(t, [alpha, 1.0 - alpha])
    return float(u_lo), float(u_hi)


def _stratified_sample(ctx: _Context, rng: np.random.Generator) -> StratifiedClusterSample:
    sc = ctx.scenario
    counts: dict[str, np.ndarray] = {}
    sizes: dict[str, np.ndarray] = {}
    pop: dict[str, int] = {}
    for label, psu_idx in ctx.groups.items():
        n_l = sc.first_stage.allocations[label]
        sel = psu_idx[si_order(psu_idx.size, n_l, rng)]
        counts[label] = ctx.cat_counts[sel]
        sizes[label] = ctx.frame.sizes[sel].astype(np.float64)
        pop[label] = int(psu_idx.size)
    return StratifiedClusterSample(tuple(ctx.groups.keys()), pop, counts, sizes)


def _strat_replicate_row(ctx: _Context, rng: np.random.Generator, row: np.ndarray) -> None:
    sc = ctx.scenario
    e = sc.estimands[0]
    sample = _stratified_sample(ctx, rng)
    p_hat, _ = proportion_estimate(sample)
    row[ctx.slots[("point", e.label)]] = p_hat

    v_stwr = None
    if STRAT_WR in sc.variance_methods:
        _, v_stwr, _, _ = linearized_values(sample)
        row[ctx.slots[("var", e.label, STRAT_WR)]] = v_stwr
        lo, hi = normal_ci(p_hat, v_stwr, sc.ci_alpha)
        row[ctx.slots[("ci", e.label, "ci_normal_stwr", "lo")]] = lo
        row[ctx.slots[("ci", e.label, "ci_normal_stwr", "hi")]] = hi

    if sc.bootstrap is None:
        return
    cfg = sc.bootstrap
    reps = stratified_proportion_resample(sample, cfg, rng=rng, compute_se=sc.studentized)
    row[ctx.slots[("bootvar", e.label)]] = float(np.var(reps.theta_star, ddof=1))
    lo, hi = np.quantile(reps.theta_star, [cfg.alpha, 1.0 - cfg.alpha])
    row[ctx.slots[("ci", e.label, "ci_percentile", "lo")]] = lo
    row[ctx.slots[("ci", e.label, "ci_percentile", "hi")]] = hi
    if sc.studentized:
        if v_stwr is None:
            raise ValueError("Studentized intervals need the STRAT_WR base variance")
        base_se = math.sqrt(v_stwr)
        u_lo, u_hi = _pivot_quantiles(reps.theta_star, p_hat, reps.se_star, cfg.alpha)
        row[ctx.slots[("ci", e.label, "ci_studentized", "lo")]] = p_hat - u_hi * base_se
        row[ctx.slots[("ci", e.label, "ci_studentized", "hi")]] = p_hat - u_lo * base_se


def _replicate_rows(ctx: _Context, start: int, end: int) -> np.ndarray:
    out = np.full((end - start, ctx.n_slots), np.nan)
    strat = ctx.scenario.first_stage.kind == "STRAT_SI"
    for b in range(start, end):
        rng = ctx.rng_for(b, "mc")
        if strat:
            _strat_replicate_row(ctx, rng, out[b - start])
        else:
            _si_replicate_row(ctx, rng, out[b - start])
    return out


def _point_rows(ctx: _Context, start: int, end: int) -> np.ndarray:
    sc = ctx.scenario
    out = np.empty((end - start, len(sc.estimands)))
    strat = sc.first_stage.kind == "STRAT_SI"
    for b in range(start, end):
        rng = ctx.rng_for(b, "true")
        if strat:
            p_hat, _ = proportion_estimate(_stratified_sample(ctx, rng))
            out[b - start, 0] = p_hat
        else:
            yhat, _ = _draw_si_estimates(ctx, rng)
            totals = ctx.frame.n_psus * yhat.mean(axis=0)
            for j, (e, sl) in enumerate(zip(sc.estimands, ctx.slices)):
                out[b - start, j] = float(e.evaluate(totals[None, sl])[0])
    return out


# module-level worker state for fork-based pools
_WORKER_CTX: _Context | None = None


def _pool_init(ctx: _Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _pool_mc(span: tuple[int, int]) -> np.ndarray:
    return _replicate_rows(_WORKER_CTX, span[0], span[1])


def _pool_true(span: tuple[int, int]) -> np.ndarray:
    return _point_rows(_WORKER_CTX, span[0], span[1])


def _parallel(fn_serial, pool_fn, total: int, threads: int, ctx: _Context) -> np.ndarray:
    """Run a chunked replicate loop, serial or on a fork pool.

    Every replicate derives its stream from its own index, and chunk results
    are reassembled in index order, so the output does not depend on the
    thread count.
    """
    if threads <= 1 or total < 32:
        return fn_serial(ctx, 0, total)
    try:
        mp = multiprocessing.get_context("fork")
    except ValueError:
        return fn_serial(ctx, 0, total)
    chunk = max(16, -(-total // (threads * 8)))
    spans = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    with mp.Pool(processes=threads, initializer=_pool_init, initargs=(ctx,)) as pool:
        parts = pool.map(pool_fn, spans)
    return np.vstack(parts)


# ---------------------------------------------------------------------------
# public runners
# ---------------------------------------------------------------------------


def approximate_true_variance(
    frame: Frame,
    scenario: Scenario,
    seed: int,
    threads: int = 1,
    stream_tag: tuple = (),
) -> tuple[dict[str, float], dict[str, float]]:
    """Empirical variance (and mean) of the point estimators over C samples.

    Returns ``(v_true, mean)`` keyed by estimand label; C = scenario.true_run.
    """
    if scenario.true_run < 1000:
        raise ValueError("the reference run needs at least 1000 samples")
    ctx = _build_context(frame, scenario, seed, stream_tag)
    theta = _parallel(_point_rows, _pool_true, scenario.true_run, threads, ctx)
    v_true = {e.label: float(np.var(theta[:, j], ddof=1)) for j, e in enumerate(scenario.estimands)}
    means = {e.label: float(theta[:, j].mean()) for j, e in enumerate(scenario.estimands)}
    return v_true, means


def run_scenario(
    frame: Frame,
    scenario: Scenario,
    seed: int,
    threads: int = 1,
    v_true: Mapping[str, float] | None = None,
    theta_true: Mapping[str, float] | None = None,
    stream_tag: tuple = (),
) -> list[MCReport]:
    """Run the Monte Carlo study for one scenario and summarize it.

    ``theta_true`` defaults to the exact population values; ``v_true`` (the
    reference for variance-estimator bias) defaults to a separate
    ``scenario.true_run``-sample approximation.
    """
    ctx = _build_context(frame, scenario, seed, stream_tag)
    if v_true is None:
        needs_v = bool(scenario.variance_methods) or scenario.bootstrap is not None
        if needs_v:
            v_true, _ = approximate_true_variance(
                frame, scenario, seed, threads, stream_tag
            )
        else:
            v_true = {}
    theta_true = dict(theta_true) if theta_true is not None else {
        e.label: population_value(frame, e) for e in scenario.estimands
    }

    rows = _parallel(_replicate_rows, _pool_mc, scenario.replicates, threads, ctx)
    b = scenario.replicates
    reports: list[MCReport] = []

    def rb_rs(values: np.ndarray, ref: float) -> tuple[float, float, float, float, float, float]:
        if ref == 0:
            raise ValueError("relative bias/stability need a nonzero reference value")
        mean = float(values.mean())
        mean_se = float(values.std(ddof=1)) / math.sqrt(b)
        msq = float(np.mean((values - ref) ** 2))
        msq_se = float(np.std((values - ref) ** 2, ddof=1)) / math.sqrt(b)
        rb = 100.0 * (mean - ref) / ref
        rb_se = 100.0 * mean_se / abs(ref)
        rs = 100.0 * math.sqrt(msq) / abs(ref)
        rs_se = 100.0 * msq_se / (2.0 * math.sqrt(msq) * abs(ref)) if msq > 0 else 0.0
        return rb, rb_se, rs, rs_se, mean, mean_se

    for e, sl in zip(scenario.estimands, ctx.slices):
        theta_ref = theta_true[e.label]
        values = rows[:, ctx.slots[("point", e.label)]]
        rb, rb_se, rs, rs_se, mean, mean_se = rb_rs(values, theta_ref)
        reports.append(
            MCReport(e.label, "point", "point", theta_ref, b, rb, rb_se, rs, rs_se,
                     mean_estimate=mean, mean_se=mean_se)
        )

        def ci_report(family: str) -> MCReport:
            lo = rows[:, ctx.slots[("ci", e.label, family, "lo")]]
            hi = rows[:, ctx.slots[("ci", e.label, family, "hi")]]
            l_pct, u_pct = coverage_stats(lo, hi, theta_ref)
            two = (l_pct + u_pct) / 100.0
            tail_se = 100.0 * math.sqrt(max(two / 2 * (1 - two / 2), 1e-12) / b)
            return MCReport(e.label, family, "ci", theta_ref, b,
                            lower_pct=l_pct, upper_pct=u_pct, tail_se=tail_se)

        for vm in scenario.variance_methods:
            key = ("var", e.label, vm)
            if key not in ctx.slots:
                continue
            ref = v_true[e.label]
            vals = rows[:, ctx.slots[key]]
            rb, rb_se, rs, rs_se, mean, mean_se = rb_rs(vals, ref)
            reports.append(
                MCReport(e.label, _FAMILY[vm], "variance", ref, b, rb, rb_se, rs, rs_se,
                         mean_estimate=mean, mean_se=mean_se)
            )
            reports.append(ci_report(f"ci_normal_{_FAMILY[vm][2:]}"))
        if scenario.bootstrap is not None:
            ref = v_true[e.label]
            vals = rows[:, ctx.slots[("bootvar", e.label)]]
            rb, rb_se, rs, rs_se, mean, mean_se = rb_rs(vals, ref)
            reports.append(
                MCReport(e.label, "boot_var", "variance", ref, b, rb, rb_se, rs, rs_se,
                         mean_estimate=mean, mean_se=mean_se)
            )
            reports.append(ci_report("ci_percentile"))
            if scenario.studentized and ("ci", e.label, "ci_studentized", "lo") in ctx.slots:
                reports.append(ci_report("ci_studentized"))
    return reports


def scaling_study(
    frame: Frame,
    cells: Sequence[tuple[dict, Scenario]],
    seed: int,
    threads: int = 1,
) -> list[dict]:
    """Run a grid of scenarios and flatten the reports into long-format rows.

    ``cells`` pairs row metadata (population, rho, n0, nI, ...) with a
    scenario; each cell runs on its own substream.  Returns dict rows with
    the metadata plus estimand/metric/value/mc_se columns.
    """
    if not cells:
        raise ValueError("empty scenario grid")
    rows: list[dict] = []
    for idx, (meta, scenario) in enumerate(cells):
        reports = run_scenario(
            frame, scenario, seed, threads=threads, stream_tag=("cell", idx)
        )
        for rep in reports:
            for metric, value, mc_se in rep.metric_rows():
                row = dict(meta)
                row.update(
                    estimand=rep.estimand, metric=metric, value=value, mc_se=mc_se
                )
                rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# distributional screen
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalityScreen:
    statistic: float
    critical: float

    @property
    def passed(self) -> bool:
        return self.statistic < self.critical


def anderson_darling_normal(values: np.ndarray) -> float:
    """Anderson-Darling statistic against the standard normal (fully specified)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    if n < 8:
        raise ValueError("need at least 8 observations")
    u = 0.5 * (1.0 + np.array([math.erf(v / math.sqrt(2.0)) for v in x]))
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    i = np.arange(1, n + 1)
    return float(-n - np.mean((2 * i - 1) * (np.log(u) + np.log1p(-u[::-1]))))


def normality_screen(values: np.ndarray, critical: float = 6.0) -> NormalityScreen:
    """Screen a pivot sample for normality.

    The default critical value 6.0 is the asymptotic upper point of the
    fully-specified-normal Anderson-Darling statistic at level 0.001.
    """
    return NormalityScreen(anderson_darling_normal(values), critical)
