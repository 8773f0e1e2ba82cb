"""Configuration-driven command line front end.

Commands: ``gen-pop`` (synthetic population to CSV), ``estimate`` (one
two-stage draw and its estimates), ``bootstrap`` (adds the PSU bootstrap),
``mc`` (Monte Carlo study grids) and ``verify`` (coupling bound/decay
checks).  Every command reads a JSON config; ``--seed``, ``--threads`` and
``--out`` override the config file.  Unknown config keys are errors.  All
randomness derives from the mandatory seed (never the clock), data outputs
are written atomically, and re-running a command with the same config and
seed reproduces them byte for byte at any thread count.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_variance, percentile_ci, resample_wr, studentized_ci
from .coupling import verify_decay, verify_hajek_bound, verify_sir_si_bound
from .designs import DesignSpec, draw_be, draw_si, draw_sir, psu_subtotal_estimates
from .estimators import (
    CorrelationEstimand,
    ProportionEstimand,
    RatioEstimand,
    TotalEstimand,
    TotalEstimate,
    hh_total_sir,
    ht_total_be,
    ht_total_si,
    normal_ci,
    variance_estimate,
)
from .frame import Frame, SyntheticConfig, frame_to_csv, generate_population, ingest_frame
from .montecarlo import Scenario, scaling_study
from .rng import GENERATOR_ID, substream

__all__ = ["parse_config", "execute", "main", "RunConfig", "ConfigError"]

COMMANDS = ("gen-pop", "estimate", "bootstrap", "mc", "verify")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    command: str
    seed: int
    threads: int
    out: str
    payload: dict


# ---------------------------------------------------------------------------
# config parsing and validation
# ---------------------------------------------------------------------------


def _check_keys(obj: Mapping, allowed: Sequence[str], path: str) -> None:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")


def _require(obj: Mapping, key: str, path: str) -> Any:
    if key not in obj:
        raise ConfigError(f"{path}.{key}: missing required key")
    return obj[key]


def _as_int(value: Any, path: str, minimum: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path}: expected an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return value


def _as_num(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(value)


def _as_str(value: Any, path: str, choices: Sequence[str] | None = None) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    if choices is not None and value not in choices:
        raise ConfigError(f"{path}: expected one of {list(choices)}, got {value!r}")
    return value


def _as_list(value: Any, path: str) -> list:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a nonempty list")
    return value


def _parse_population(obj: Any, path: str) -> dict:
    _check_keys(obj, ["n_psus", "mean_size", "size_cv", "lam", "sigma",
                      "icc_targets", "pair_corr_target"], path)
    return {
        "n_psus": _as_int(_require(obj, "n_psus", path), f"{path}.n_psus", 1),
        "mean_size": _as_num(_require(obj, "mean_size", path), f"{path}.mean_size"),
        "size_cv": _as_num(_require(obj, "size_cv", path), f"{path}.size_cv"),
        "lam": _as_num(_require(obj, "lam", path), f"{path}.lam"),
        "sigma": _as_num(_require(obj, "sigma", path), f"{path}.sigma"),
        "icc_targets": tuple(
            _as_num(v, f"{path}.icc_targets[{i}]")
            for i, v in enumerate(_as_list(_require(obj, "icc_targets", path), f"{path}.icc_targets"))
        ),
        "pair_corr_target": _as_num(
            _require(obj, "pair_corr_target", path), f"{path}.pair_corr_target"
        ),
    }


def _parse_estimand(obj: Any, path: str):
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{path}: expected an object")
    kind = _as_str(_require(obj, "kind", path), f"{path}.kind",
                   ["total", "ratio", "correlation", "proportion"])
    rho = obj.get("rho")
    if rho is not None:
        rho = _as_num(rho, f"{path}.rho")
    # variable numbers are 1-based, matching the y1..yq column names
    if kind == "total":
        _check_keys(obj, ["kind", "var", "rho"], path)
        est = TotalEstimand(_as_int(_require(obj, "var", path), f"{path}.var", 1) - 1)
    elif kind == "ratio":
        _check_keys(obj, ["kind", "num", "den", "rho"], path)
        est = RatioEstimand(
            _as_int(_require(obj, "num", path), f"{path}.num", 1) - 1,
            _as_int(_require(obj, "den", path), f"{path}.den", 1) - 1,
        )
    elif kind == "correlation":
        _check_keys(obj, ["kind", "a", "b", "rho"], path)
        est = CorrelationEstimand(
            _as_int(_require(obj, "a", path), f"{path}.a", 1) - 1,
            _as_int(_require(obj, "b", path), f"{path}.b", 1) - 1,
        )
    else:
        _check_keys(obj, ["kind", "var", "category", "rho"], path)
        est = ProportionEstimand(
            _as_int(_require(obj, "var", path), f"{path}.var", 1) - 1,
            _as_num(_require(obj, "category", path), f"{path}.category"),
        )
    return est, kind, rho


def _parse_bootstrap(obj: Any, path: str, seed: int) -> BootstrapConfig:
    _check_keys(obj, ["replicates", "m", "alpha"], path)
    m = obj.get("m")
    if m is not None:
        m = _as_int(m, f"{path}.m", 2)
    try:
        return BootstrapConfig(
            replicates=_as_int(obj.get("replicates", 1000), f"{path}.replicates", 50),
            m=m,
            alpha=_as_num(obj.get("alpha", 0.025), f"{path}.alpha"),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(
    command: str,
    config_path: str | None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Load, merge and validate a run configuration.

    ``overrides`` (typically from command-line flags) replace top-level
    config values; validation is strict and rejects unknown keys.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command: {command!r}")
    raw: dict = {}
    if config_path is not None:
        with open(config_path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    common = ["seed", "threads", "out"]
    payload_keys = {
        "gen-pop": ["population", "format"],
        "estimate": ["frame", "design", "second_stage", "estimands",
                     "variance_methods", "alpha"],
        "bootstrap": ["frame", "design", "second_stage", "estimands",
                      "variance_methods", "alpha", "bootstrap", "studentized"],
        "mc": ["population", "population_label", "frame", "scenario"],
        "verify": ["bounds", "decay"],
    }[command]
    _check_keys(raw, common + payload_keys, "config")

    if "seed" not in raw:
        raise ConfigError("config.seed: a seed is mandatory (no wall-clock default)")
    seed = _as_int(raw["seed"], "config.seed", 0)
    threads = _as_int(raw.get("threads", 1), "config.threads", 1)
    if "out" not in raw:
        raise ConfigError("config.out: an output directory is required")
    out = _as_str(raw["out"], "config.out")

    payload = {k: raw[k] for k in payload_keys if k in raw}
    _VALIDATORS[command](payload, seed)
    return RunConfig(command, seed, threads, out, payload)


def _validate_genpop(payload: dict, seed: int) -> None:
    pop = _parse_population(_require(payload, "population", "config"), "config.population")
    payload["population"] = pop
    if "format" in payload:
        _as_str(payload["format"], "config.format", ["csv", "tsv"])
    try:
        SyntheticConfig(seed=seed, **pop)
    except ValueError as exc:
        raise ConfigError(f"config.population: {exc}") from None


def _validate_estimate(payload: dict, seed: int, bootstrap: bool = False) -> None:
    _as_str(_require(payload, "frame", "config"), "config.frame")
    design = _require(payload, "design", "config")
    _check_keys(design, ["kind", "n_I", "expected_n_I"], "config.design")
    kind = _as_str(_require(design, "kind", "config.design"), "config.design.kind",
                   ["SI", "SIR", "BE"])
    if kind in ("SI", "SIR"):
        _as_int(_require(design, "n_I", "config.design"), "config.design.n_I", 1)
    else:
        _as_num(_require(design, "expected_n_I", "config.design"), "config.design.expected_n_I")
    second = _require(payload, "second_stage", "config")
    _check_keys(second, ["method", "n0"], "config.second_stage")
    method = _as_str(_require(second, "method", "config.second_stage"),
                     "config.second_stage.method", ["SI", "SYSTEMATIC", "CENSUS"])
    if method != "CENSUS":
        _as_int(_require(second, "n0", "config.second_stage"), "config.second_stage.n0", 1)
    elif "n0" in second and second["n0"] is not None:
        raise ConfigError("config.second_stage.n0: a census takes no n0")
    ests = _as_list(_require(payload, "estimands", "config"), "config.estimands")
    payload["_estimands"] = [
        _parse_estimand(e, f"config.estimands[{i}]") for i, e in enumerate(ests)
    ]
    for i, vm in enumerate(payload.get("variance_methods", [])):
        _as_str(vm, f"config.variance_methods[{i}]",
                ["UNBIASED", "SIMPLIFIED", "WITH_REPLACEMENT", "BERNOULLI"])
    if "alpha" in payload:
        alpha = _as_num(payload["alpha"], "config.alpha")
        if not 0.0 < alpha < 0.5:
            raise ConfigError("config.alpha: must be in (0, 0.5)")
    if bootstrap:
        if kind != "SI":
            raise ConfigError("config.design.kind: the PSU bootstrap runs on SI designs")
        payload["_bootstrap"] = _parse_bootstrap(
            payload.get("bootstrap", {}), "config.bootstrap", seed
        )
        if "studentized" in payload and not isinstance(payload["studentized"], bool):
            raise ConfigError("config.studentized: expected a boolean")


def _validate_bootstrap(payload: dict, seed: int) -> None:
    _validate_estimate(payload, seed, bootstrap=True)


def _validate_mc(payload: dict, seed: int) -> None:
    if ("population" in payload) == ("frame" in payload):
        raise ConfigError("config: provide exactly one of 'population' or 'frame'")
    if "population" in payload:
        payload["population"] = _parse_population(payload["population"], "config.population")
        try:
            SyntheticConfig(seed=seed, **payload["population"])
        except ValueError as exc:
            raise ConfigError(f"config.population: {exc}") from None
    if "population_label" in payload:
        _as_str(payload["population_label"], "config.population_label")
    scn = _require(payload, "scenario", "config")
    _check_keys(scn, ["first_stage", "second_stage", "estimands", "variance_methods",
                      "bootstrap", "studentized", "alpha", "replicates", "true_run"],
                "config.scenario")
    first = _require(scn, "first_stage", "config.scenario")
    _check_keys(first, ["kind", "n_I", "allocations"], "config.scenario.first_stage")
    kind = _as_str(_require(first, "kind", "config.scenario.first_stage"),
                   "config.scenario.first_stage.kind", ["SI", "STRAT_SI"])
    if kind == "SI":
        grid = _as_list(_require(first, "n_I", "config.scenario.first_stage"),
                        "config.scenario.first_stage.n_I")
        for i, n in enumerate(grid):
            _as_int(n, f"config.scenario.first_stage.n_I[{i}]", 1)
    else:
        alloc = _require(first, "allocations", "config.scenario.first_stage")
        if not isinstance(alloc, Mapping) or not alloc:
            raise ConfigError("config.scenario.first_stage.allocations: expected a nonempty object")
        for label, n in alloc.items():
            _as_int(n, f"config.scenario.first_stage.allocations[{label}]", 1)
    second = _require(scn, "second_stage", "config.scenario")
    _check_keys(second, ["method", "n0"], "config.scenario.second_stage")
    method = _as_str(_require(second, "method", "config.scenario.second_stage"),
                     "config.scenario.second_stage.method", ["SI", "SYSTEMATIC", "CENSUS"])
    if method != "CENSUS":
        n0s = _as_list(_require(second, "n0", "config.scenario.second_stage"),
                       "config.scenario.second_stage.n0")
        for i, n0 in enumerate(n0s):
            _as_int(n0, f"config.scenario.second_stage.n0[{i}]", 1)
    ests = _as_list(_require(scn, "estimands", "config.scenario"), "config.scenario.estimands")
    scn["_estimands"] = [
        _parse_estimand(e, f"config.scenario.estimands[{i}]") for i, e in enumerate(ests)
    ]
    for i, vm in enumerate(scn.get("variance_methods", [])):
        _as_str(vm, f"config.scenario.variance_methods[{i}]",
                ["UNBIASED", "SIMPLIFIED", "WITH_REPLACEMENT", "STRAT_WR"])
    if scn.get("bootstrap") is not None:
        scn["_bootstrap"] = _parse_bootstrap(scn["bootstrap"], "config.scenario.bootstrap", seed)
    if "studentized" in scn and not isinstance(scn["studentized"], bool):
        raise ConfigError("config.scenario.studentized: expected a boolean")
    if "alpha" in scn:
        _as_num(scn["alpha"], "config.scenario.alpha")
    _as_int(scn.get("replicates", 1000), "config.scenario.replicates", 100)
    _as_int(scn.get("true_run", 20000), "config.scenario.true_run", 1000)


def _parse_verify_frame(obj: Any, path: str) -> dict:
    _check_keys(obj, ["kind", "n_psus", "mean", "sd", "path"], path)
    kind = _as_str(_require(obj, "kind", path), f"{path}.kind", ["range", "normal", "path"])
    if kind == "path":
        _as_str(_require(obj, "path", path), f"{path}.path")
    else:
        _as_int(_require(obj, "n_psus", path), f"{path}.n_psus", 2)
        if kind == "normal":
            _as_num(_require(obj, "mean", path), f"{path}.mean")
            _as_num(_require(obj, "sd", path), f"{path}.sd")
    return dict(obj)


def _validate_verify(payload: dict, seed: int) -> None:
    if not payload.get("bounds") and not payload.get("decay"):
        raise ConfigError("config: verify needs 'bounds' and/or 'decay'")
    for i, spec in enumerate(payload.get("bounds", [])):
        path = f"config.bounds[{i}]"
        _check_keys(spec, ["check", "n_I", "replicates", "frame"], path)
        _as_str(_require(spec, "check", path), f"{path}.check", ["be_si", "sir_si"])
        _as_int(_require(spec, "n_I", path), f"{path}.n_I", 1)
        _as_int(spec.get("replicates", 100000), f"{path}.replicates", 1000)
        _parse_verify_frame(_require(spec, "frame", path), f"{path}.frame")
    decay = payload.get("decay")
    if decay is not None:
        path = "config.decay"
        _check_keys(decay, ["n_I", "m", "replicates", "frames"], path)
        _as_int(_require(decay, "n_I", path), f"{path}.n_I", 2)
        if decay.get("m") is not None:
            _as_int(decay["m"], f"{path}.m", 2)
        _as_int(decay.get("replicates", 100000), f"{path}.replicates", 1000)
        frames = _as_list(_require(decay, "frames", path), f"{path}.frames")
        if len(frames) < 3:
            raise ConfigError(f"{path}.frames: need at least 3 frames")
        for i, spec in enumerate(frames):
            _parse_verify_frame(spec, f"{path}.frames[{i}]")


_VALIDATORS = {
    "gen-pop": _validate_genpop,
    "estimate": lambda p, s: _validate_estimate(p, s),
    "bootstrap": _validate_bootstrap,
    "mc": _validate_mc,
    "verify": _validate_verify,
}


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: str, obj: Any) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(value: Any) -> Any:
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def _strip_private(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {k: _strip_private(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_strip_private(v) for v in obj]
    return obj


def _manifest(cfg: RunConfig, written: list[str], started: float) -> dict:
    payload = _strip_private(cfg.payload)
    return {
        "command": cfg.command,
        "config": payload,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "rng": GENERATOR_ID,
        "version": __version__,
        "outputs": sorted(os.path.basename(p) for p in written),
        "wall_time_s": round(time.monotonic() - started, 3),  # timestamp-like field, manifest only
    }


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _load_frame(path: str) -> Frame:
    return ingest_frame(path)


def _run_genpop(cfg: RunConfig, out: str) -> list[str]:
    pop_cfg = SyntheticConfig(seed=cfg.seed, **cfg.payload["population"])
    frame = generate_population(pop_cfg)
    ext = cfg.payload.get("format", "csv")
    frame_path = os.path.join(out, f"frame.{ext}")
    # frame_to_csv writes directly; route through a buffer for atomicity
    buf_path = frame_path + f".tmp.{os.getpid()}"
    frame_to_csv(frame, buf_path, delimiter="\t" if ext == "tsv" else ",")
    os.replace(buf_path, frame_path)
    sidecar = {
        "population": cfg.payload["population"],
        "seed": cfg.seed,
        "rng": GENERATOR_ID,
        "n_psus": frame.n_psus,
        "n_ssus": frame.n_ssus,
        "n_vars": frame.n_vars,
    }
    meta_path = os.path.join(out, "frame.meta.json")
    _write_json(meta_path, sidecar)
    return [frame_path, meta_path]


def _one_draw_estimates(cfg: RunConfig, frame: Frame):
    payload = cfg.payload
    design = payload["design"]
    second = payload["second_stage"]
    method = second["method"]
    n0 = second.get("n0")
    estimands = payload["_estimands"]
    rng = substream(cfg.seed, "estimate")

    kind = design["kind"]
    if kind == "SI":
        draw = draw_si(frame.n_psus, design["n_I"], rng)
    elif kind == "SIR":
        draw = draw_sir(frame.n_psus, design["n_I"], rng)
    else:
        f = design["expected_n_I"] / frame.n_psus
        draw = draw_be(frame.n_psus, f, rng)

    blocks = [est.ssu_columns(frame.values) for est, _, _ in estimands]
    widths = [b.shape[1] for b in blocks]
    starts = np.concatenate(([0], np.cumsum(widths)))
    columns = np.hstack(blocks) if blocks else frame.values
    need_vhat = any(vm in ("UNBIASED", "BERNOULLI") for vm in payload.get("variance_methods", []))
    if method == "CENSUS":
        col_subtotals = np.add.reduceat(columns, frame.offsets[:-1], axis=0)
        yhat = col_subtotals[draw.order]
        vhat = np.zeros_like(yhat) if need_vhat else None
    else:
        yhat, vhat = psu_subtotal_estimates(
            frame, columns, draw.order, method, n0, rng, with_vhat=need_vhat and method == "SI"
        )
        if need_vhat and vhat is None:
            raise ValueError(
                "UNBIASED/BERNOULLI variance methods need an SI or census second stage"
            )
    slices = [slice(int(starts[i]), int(starts[i + 1])) for i in range(len(estimands))]
    return draw, yhat, vhat, slices


def _total_for(draw, z, vhats, kind: str) -> TotalEstimate:
    est_pair = (z[:, None], None if vhats is None else vhats[:, None])
    if kind == "SI":
        return ht_total_si(draw, est_pair)
    if kind == "SIR":
        return hh_total_sir(draw, est_pair)
    return ht_total_be(draw, est_pair)


def _run_estimate(cfg: RunConfig, out: str) -> list[str]:
    payload = cfg.payload
    frame = _load_frame(payload["frame"])
    alpha = payload.get("alpha", 0.025)
    kind = payload["design"]["kind"]
    draw, yhat, vhat, slices = _one_draw_estimates(cfg, frame)
    n_exp = payload["design"].get("n_I") or payload["design"]["expected_n_I"]

    results = []
    for (est, est_kind, rho), sl in zip(payload["_estimands"], slices):
        if draw.n_drawn == 0:
            totals = np.zeros(sl.stop - sl.start)
        else:
            if kind == "BE":
                totals = frame.n_psus / n_exp * yhat[:, sl].sum(axis=0)
            else:
                totals = frame.n_psus * yhat[:, sl].mean(axis=0)
        point = float(est.evaluate(totals[None, :])[0])
        entry = {"estimand": est.label, "kind": est_kind, "point": point}
        if rho is not None:
            entry["rho"] = rho
        if isinstance(est, TotalEstimand) and payload.get("variance_methods"):
            z = yhat[:, sl][:, 0] if draw.n_drawn else np.empty(0)
            v_col = None if vhat is None else vhat[:, sl][:, 0]
            total = _total_for(draw, z, v_col, kind)
            variances = {}
            cis = {}
            for vm in payload["variance_methods"]:
                try:
                    v = variance_estimate(total, vm)
                except ValueError:
                    continue  # method/design mismatch; skip quietly in reports
                variances[vm] = v
                lo, hi = normal_ci(point, v, alpha)
                cis[vm] = [lo, hi]
            entry["variance_by_method"] = variances
            entry["ci_by_method"] = cis
        results.append(entry)

    report = {
        "design": draw.to_dict(),
        "second_stage": payload["second_stage"],
        "alpha": alpha,
        "seeds": {"master": cfg.seed, "stream": "estimate"},
        "estimates": results,
    }
    report_path = os.path.join(out, "estimate.json")
    _write_json(report_path, report)
    draw_path = os.path.join(out, "draw.json")
    _write_json(draw_path, draw.to_dict())
    return [report_path, draw_path]


def _run_bootstrap(cfg: RunConfig, out: str) -> list[str]:
    payload = cfg.payload
    frame = _load_frame(payload["frame"])
    alpha = payload.get("alpha", 0.025)
    boot_cfg: BootstrapConfig = payload["_bootstrap"]
    studentized = payload.get("studentized", False)
    draw, yhat, vhat, slices = _one_draw_estimates(cfg, frame)

    results = []
    replicate_rows = []
    for (est, est_kind, rho), sl in zip(payload["_estimands"], slices):
        totals = frame.n_psus * yhat[:, sl].mean(axis=0)
        point = float(est.evaluate(totals[None, :])[0])
        want_se = studentized and isinstance(est, TotalEstimand)
        reps = resample_wr(
            yhat[:, sl], frame.n_psus, boot_cfg, estimand=est,
            rng=substream(cfg.seed, "bootstrap", est.label),
            compute_se=want_se,
        )
        entry = {
            "estimand": est.label,
            "kind": est_kind,
            "point": point,
            "bootstrap_variance": bootstrap_variance(reps),
            "ci_percentile": list(percentile_ci(reps, boot_cfg.alpha)),
        }
        if rho is not None:
            entry["rho"] = rho
        if want_se:
            z = yhat[:, sl][:, 0]
            total = _total_for(draw, z, None, "SI")
            base_v = variance_estimate(total, "SIMPLIFIED")
            entry["ci_studentized"] = list(
                studentized_ci(reps, float(np.sqrt(base_v)), boot_cfg.alpha)
            )
        results.append(entry)
        for r, theta in enumerate(reps.theta_star):
            se = reps.se_star[r] if reps.se_star is not None else ""
            replicate_rows.append([r, est.label, theta, se])

    report = {
        "design": draw.to_dict(),
        "second_stage": payload["second_stage"],
        "alpha": alpha,
        "bootstrap": {"replicates": boot_cfg.replicates, "m": boot_cfg.m, "alpha": boot_cfg.alpha},
        "seeds": {"master": cfg.seed},
        "estimates": results,
    }
    report_path = os.path.join(out, "bootstrap.json")
    _write_json(report_path, report)
    reps_path = os.path.join(out, "replicates.csv")
    _write_csv(reps_path, ["r", "estimand", "theta_star", "se_star"], replicate_rows)
    return [report_path, reps_path]


def _mc_cells(payload: dict, seed: int):
    scn = payload["scenario"]
    first = scn["first_stage"]
    second = scn["second_stage"]
    estimands = tuple(e for e, _, _ in scn["_estimands"])
    rho_by_label = {e.label: rho for e, _, rho in scn["_estimands"]}
    kind_by_label = {e.label: k for e, k, _ in scn["_estimands"]}
    common = dict(
        estimands=estimands,
        variance_methods=tuple(scn.get("variance_methods", [])),
        bootstrap=scn.get("_bootstrap"),
        studentized=scn.get("studentized", False),
        ci_alpha=scn.get("alpha", 0.025),
        replicates=scn.get("replicates", 1000),
        true_run=scn.get("true_run", 20000),
    )
    label = payload.get("population_label", "pop")
    cells = []
    if first["kind"] == "SI":
        n0_grid = [None] if second["method"] == "CENSUS" else second["n0"]
        for n0 in n0_grid:
            for n_i in first["n_I"]:
                meta = {"population": label, "n0": n0 if n0 is not None else "", "nI": n_i}
                scenario = Scenario(
                    first_stage=DesignSpec("SI", n_I=n_i),
                    second_stage=second["method"],
                    n0=n0,
                    **common,
                )
                cells.append((meta, scenario))
    else:
        alloc = {str(k): int(v) for k, v in first["allocations"].items()}
        meta = {"population": label, "n0": "", "nI": sum(alloc.values())}
        scenario = Scenario(
            first_stage=DesignSpec("STRAT_SI", allocations=alloc),
            second_stage=second["method"],
            n0=None,
            **common,
        )
        cells.append((meta, scenario))
    return cells, rho_by_label, kind_by_label


def _run_mc(cfg: RunConfig, out: str) -> list[str]:
    payload = cfg.payload
    if "population" in payload:
        frame = generate_population(SyntheticConfig(seed=cfg.seed, **payload["population"]))
    else:
        frame = _load_frame(payload["frame"])
    cells, rho_by_label, kind_by_label = _mc_cells(payload, cfg.seed)
    rows = scaling_study(frame, cells, cfg.seed, threads=cfg.threads)

    by_kind: dict[str, list] = {}
    for row in rows:
        kind = kind_by_label[row["estimand"]]
        rho = rho_by_label[row["estimand"]]
        by_kind.setdefault(kind, []).append(
            [row["population"], "" if rho is None else rho, row["n0"], row["nI"],
             row["estimand"], row["metric"], row["value"], row["mc_se"]]
        )
    written = []
    header = ["population", "rho", "n0", "nI", "estimand", "metric", "value", "mc_se"]
    for kind, kind_rows in sorted(by_kind.items()):
        path = os.path.join(out, f"mc_{kind}.csv")
        _write_csv(path, header, kind_rows)
        written.append(path)
    return written


def _verify_frame(spec: dict, seed: int, index: int) -> Frame:
    if spec["kind"] == "path":
        return _load_frame(spec["path"])
    n = spec["n_psus"]
    if spec["kind"] == "range":
        subtotals = np.arange(1.0, n + 1.0)
    else:
        rng = substream(seed, "verify-frame", index)
        subtotals = spec["mean"] + spec["sd"] * rng.standard_normal(n)
    return Frame(subtotals[:, None], np.ones(n, dtype=np.int64))


def _run_verify(cfg: RunConfig, out: str) -> list[str]:
    payload = cfg.payload
    written = []
    bound_rows = []
    bound_dicts = []
    for i, spec in enumerate(payload.get("bounds", [])):
        frame = _verify_frame(spec["frame"], cfg.seed, i)
        fn = verify_hajek_bound if spec["check"] == "be_si" else verify_sir_si_bound
        report = fn(frame, spec["n_I"], spec.get("replicates", 100000), cfg.seed)
        d = report.to_dict()
        bound_dicts.append(d)
        bound_rows.append([d["check"], d["n_psus"], d["n_I"], d["replicates"],
                           d["lhs_estimate"], d["lhs_se"], d["rhs_bound"], d["passed"]])
    if bound_rows:
        path = os.path.join(out, "bounds.csv")
        _write_csv(path, ["check", "n_psus", "n_I", "replicates",
                          "lhs_estimate", "lhs_se", "rhs_bound", "passed"], bound_rows)
        written.append(path)
        jpath = os.path.join(out, "bounds.json")
        _write_json(jpath, bound_dicts)
        written.append(jpath)

    decay = payload.get("decay")
    if decay is not None:
        frames = [
            _verify_frame(spec, cfg.seed, 1000 + i) for i, spec in enumerate(decay["frames"])
        ]
        report = verify_decay(
            frames, decay["n_I"], decay.get("replicates", 100000), cfg.seed, m=decay.get("m")
        )
        rows = [
            [r.n_psus, r.n_I, r.m, r.mean_sq_diff, r.mean_sq_diff_se,
             r.abs_s2_diff, r.abs_s2_diff_se, r.boot_sq_diff, r.boot_sq_diff_se]
            for r in report.rows
        ]
        path = os.path.join(out, "decay.csv")
        _write_csv(path, ["n_psus", "n_I", "m", "mean_sq_diff", "mean_sq_diff_se",
                          "abs_s2_diff", "abs_s2_diff_se", "boot_sq_diff", "boot_sq_diff_se"],
                   rows)
        written.append(path)
        jpath = os.path.join(out, "decay.json")
        _write_json(jpath, {
            "rows": [r.to_dict() for r in report.rows],
            "strictly_decreasing": {
                m: report.strictly_decreasing(m)
                for m in ("mean_sq_diff", "abs_s2_diff", "boot_sq_diff")
            },
        })
        written.append(jpath)
    return written


_RUNNERS = {
    "gen-pop": _run_genpop,
    "estimate": _run_estimate,
    "bootstrap": _run_bootstrap,
    "mc": _run_mc,
    "verify": _run_verify,
}


def execute(cfg: RunConfig) -> int:
    """Run a validated configuration; returns the process exit status."""
    started = time.monotonic()
    os.makedirs(cfg.out, exist_ok=True)
    written = _RUNNERS[cfg.command](cfg, cfg.out)
    manifest_path = os.path.join(cfg.out, "manifest.json")
    _write_json(manifest_path, _manifest(cfg, written, started))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="twostage",
        description="Two-stage survey sampling: estimation, bootstrap, Monte Carlo studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker processes for MC replicates")
        p.add_argument("--out", help="output directory (overrides config)")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(
            args.command,
            args.config,
            {"seed": args.seed, "threads": args.threads, "out": args.out},
        )
        return execute(cfg)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface downstream errors as JSON
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
