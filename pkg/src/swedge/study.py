"""Monte Carlo study harness: scenario grids, aggregation, and power curves.

A scenario fixes one data-generating configuration (design, horizon, cell
size, outcome model, effect-size regime) and a set of fitting models.  Every
replicate simulates a trial, fits each requested model, and builds a
percentile-bootstrap interval for each intervention's average effect; the
report aggregates bias (against the realized truth), the empirical SD,
bootstrap-interval coverage and length, the mean model SE, and Monte Carlo
standard errors for everything.

Replicates are independent tasks keyed by replicate index: the random
streams depend only on (base seed, scenario id, replicate), so reports are
identical no matter how many workers run.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .curves import EffectCurve, regime_parameters
from .design import DesignLayout, build_layout
from .fit import (FitError, MeanSystem, _bootstrap_draws, _fit_means,
                  percentile_interval)
from .simulate import SimulationConfig, cell_value_groups, cluster_period_means, simulate

__all__ = [
    "ScenarioSpec",
    "StudyRow",
    "StudyReport",
    "run_scenario",
    "run_power",
    "mc_standard_errors",
    "preset_scenarios",
    "preset_power_grid",
    "report_to_csv",
    "power_to_csv",
    "replicates_to_csv",
]

DEFAULT_VC = (0.15, 2.85)
POWER_VC = (0.05, 0.95)


def default_period_effects(T: int) -> np.ndarray:
    return np.linspace(0.1, 0.5, T)


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of a simulation study."""

    scenario_id: str
    design: str                  # concurrent | factorial | factorial-augmented
    T: int
    n: int
    outcome_model: str           # A, B1, B2, B3, B4
    regime: str | None = "small"
    fit_models: tuple[str, ...] = ("A", "B", "C")
    replicates: int = 500
    bootstrap: int = 500
    level: float = 0.95
    base_seed: int = 20240501
    m: int = 2
    offset: int = 1
    sigma_a2: float = DEFAULT_VC[0]
    sigma_e2: float = DEFAULT_VC[1]
    targets: tuple[float, ...] | None = None
    linear_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.replicates < 1 or self.bootstrap < 2:
            raise ValueError("need replicates >= 1 and bootstrap >= 2")
        if not 0 < self.level < 1:
            raise ValueError("level must be in (0, 1)")

    def layout(self) -> DesignLayout:
        return build_layout(self.design, self.T, self.m, offset=self.offset)

    def curve(self) -> EffectCurve:
        targets, low, high = self.targets, None, None
        if self.linear_range is not None:
            low, high = self.linear_range
        if targets is None or (self.outcome_model == "B1" and low is None):
            pars = regime_parameters(self.regime, self.T)
            targets = targets if targets is not None else pars["targets"]
            if low is None:
                low, high = pars["low"], pars["high"]
        return EffectCurve.from_outcome_model(self.outcome_model, self.T, targets,
                                              low=low, high=high)

    def config(self, seed: int) -> SimulationConfig:
        return SimulationConfig(layout=self.layout(), curve=self.curve(),
                                beta=default_period_effects(self.T),
                                sigma_a2=self.sigma_a2, sigma_e2=self.sigma_e2,
                                n=self.n, seed=seed)


@dataclass
class StudyRow:
    scenario_id: str
    design: str
    T: int
    n: int
    outcome_model: str
    fit_model: str
    intervention: int
    truth: float
    bias: float
    sd: float
    coverage_pct: float
    ci_length: float
    mean_se: float
    mc_se_bias: float = math.nan
    mc_se_coverage: float = math.nan
    n_fail: int = 0


@dataclass
class StudyReport:
    spec: ScenarioSpec
    rows: list[StudyRow]
    replicate_records: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# replicate execution

_WORKER_CACHE: dict = {}


def _replicate_seed(spec: ScenarioSpec, r: int) -> int:
    return (spec.base_seed * 0x9E3779B97F4A7C15 + _rng.spawn_key(spec.scenario_id) + r) % (2**63)


def _scenario_systems(spec: ScenarioSpec):
    key = (spec.scenario_id, spec.design, spec.T, spec.m, spec.n, spec.offset,
           spec.fit_models)
    cached = _WORKER_CACHE.get(key)
    if cached is None:
        layout = spec.layout()
        nij = np.full((layout.I, layout.T), spec.n)
        systems = {model: MeanSystem(layout, model, nij) for model in spec.fit_models}
        cached = (layout, systems)
        _WORKER_CACHE[key] = cached
    return cached


def run_replicate(spec: ScenarioSpec, r: int) -> list[dict]:
    """Simulate replicate r and fit every requested model.

    Returns one record per (fit model, intervention) with the estimate,
    model SE, bootstrap interval, and failure flags; a failed fit yields a
    record with ok=False.
    """
    layout, systems = _scenario_systems(spec)
    seed_r = _replicate_seed(spec, r)
    dataset = simulate(spec.config(seed=seed_r))
    means = cluster_period_means(dataset)
    groups = cell_value_groups(dataset)
    records = []
    for model in spec.fit_models:
        system = systems[model]
        boot_seed = (seed_r + 1 + _rng.spawn_key(f"boot-{model}")) % (2**63)
        try:
            fit = _fit_means(system, means.ybar, means.within_ss)
            est, se = fit.estimands()
            start = (np.array([fit.vc.sigma_a2, *fit.vc.sigma_k2]) / fit.vc.sigma_e2
                     if model == "C" else None)
            draws, nb_fail = _bootstrap_draws(system, groups, spec.bootstrap,
                                              boot_seed, True, start)
            ok_draws = draws[~np.isnan(draws).any(axis=1)]
            if ok_draws.shape[0] < 2:
                raise FitError("bootstrap produced fewer than two usable resamples")
            ci = percentile_interval(ok_draws, spec.level)
            for k in range(layout.m):
                records.append({
                    "replicate": r, "fit_model": model, "intervention": k + 1,
                    "delta_hat": float(est[k]), "se": float(se[k]),
                    "ci_low": float(ci[k, 0]), "ci_high": float(ci[k, 1]),
                    "boot_fail": int(nb_fail), "ok": True,
                })
        except FitError as exc:
            for k in range(layout.m):
                records.append({
                    "replicate": r, "fit_model": model, "intervention": k + 1,
                    "delta_hat": math.nan, "se": math.nan,
                    "ci_low": math.nan, "ci_high": math.nan,
                    "boot_fail": -1, "ok": False, "error": str(exc),
                })
    return records


def _run_replicate_task(args) -> list[dict]:
    spec, r = args
    return run_replicate(spec, r)


def _replicate_stream(spec: ScenarioSpec, workers: int):
    tasks = [(spec, r) for r in range(spec.replicates)]
    if workers <= 1:
        for t in tasks:
            yield _run_replicate_task(t)
        return
    from multiprocessing import get_context
    ctx = get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        # ordered imap keeps the merge deterministic regardless of timing
        yield from pool.imap(_run_replicate_task, tasks, chunksize=4)


def run_scenario(spec: ScenarioSpec, workers: int = 1) -> StudyReport:
    """Execute all replicates of a scenario and aggregate the report."""
    truth = spec.curve().realized()
    all_records: list[dict] = []
    for recs in _replicate_stream(spec, workers):
        all_records.extend(recs)

    rows = []
    for model in spec.fit_models:
        for k in range(1, spec.m + 1):
            recs = [x for x in all_records
                    if x["fit_model"] == model and x["intervention"] == k]
            ok = [x for x in recs if x["ok"]]
            n_fail = len(recs) - len(ok)
            if n_fail > 0.05 * spec.replicates:
                raise FitError(
                    f"scenario {spec.scenario_id}: {n_fail} of {spec.replicates} "
                    f"replicates failed for model {model}")
            est = np.array([x["delta_hat"] for x in ok])
            se = np.array([x["se"] for x in ok])
            lo = np.array([x["ci_low"] for x in ok])
            hi = np.array([x["ci_high"] for x in ok])
            cover = (lo <= truth[k - 1]) & (truth[k - 1] <= hi)
            rows.append(StudyRow(
                scenario_id=spec.scenario_id, design=spec.design, T=spec.T, n=spec.n,
                outcome_model=spec.outcome_model, fit_model=model, intervention=k,
                truth=float(truth[k - 1]),
                bias=float(est.mean() - truth[k - 1]),
                sd=float(est.std(ddof=1)) if len(est) > 1 else math.nan,
                coverage_pct=float(100.0 * cover.mean()),
                ci_length=float((hi - lo).mean()),
                mean_se=float(se.mean()),
                n_fail=n_fail,
            ))
    report = StudyReport(spec=spec, rows=rows, replicate_records=all_records)
    return mc_standard_errors(report)


def mc_standard_errors(report: StudyReport) -> StudyReport:
    """Attach Monte Carlo standard errors: SE(bias) = SD/sqrt(R) and
    SE(coverage) = sqrt(p(1-p)/R)."""
    for row in report.rows:
        R = report.spec.replicates - row.n_fail
        if R >= 2 and math.isfinite(row.sd):
            row.mc_se_bias = row.sd / math.sqrt(R)
        p = row.coverage_pct / 100.0
        row.mc_se_coverage = 100.0 * math.sqrt(max(p * (1 - p), 0.0) / max(R, 1))
    return report


# ---------------------------------------------------------------------------
# power study


@dataclass(frozen=True)
class PowerSpec:
    """Grid for the power comparison: per design and cell size, sweep the
    first intervention's average effect with a fixed gap to the second."""

    designs: tuple[str, ...] = ("concurrent", "factorial-augmented")
    T: int = 5
    offset: int = 1
    n_values: tuple[int, ...] = (30, 100, 500)
    delta1_values: tuple[float, ...] = tuple(round(0.01 + 0.1 * i, 2) for i in range(7))
    delta_gap: float = 0.28
    fit_model: str = "B"
    replicates: int = 500
    bootstrap: int = 500
    level: float = 0.95
    base_seed: int = 20240502
    sigma_a2: float = POWER_VC[0]
    sigma_e2: float = POWER_VC[1]


def _linear_range_for(T: int, delta1: float, gap: float) -> tuple[float, float]:
    # choose the linear-grid endpoints so the realized averages are exactly
    # (delta1, delta1 + gap): the grid midpoints sit (T-1) steps apart
    step = gap / (T - 1)
    low = delta1 - step * (T - 2) / 2
    high = low + step * (2 * (T - 1) - 1)
    return low, high


def power_cells(spec: PowerSpec) -> list[ScenarioSpec]:
    cells = []
    for design in spec.designs:
        for n in spec.n_values:
            for d1 in spec.delta1_values:
                low, high = _linear_range_for(spec.T, d1, spec.delta_gap)
                cells.append(ScenarioSpec(
                    scenario_id=f"power-{design}-n{n}-d{d1:g}",
                    design=design, T=spec.T, n=n, outcome_model="B1", regime=None,
                    fit_models=(spec.fit_model,), replicates=spec.replicates,
                    bootstrap=spec.bootstrap, level=spec.level,
                    base_seed=spec.base_seed, offset=spec.offset,
                    sigma_a2=spec.sigma_a2, sigma_e2=spec.sigma_e2,
                    targets=(d1, d1 + spec.delta_gap), linear_range=(low, high)))
    return cells


def run_power(spec: PowerSpec, workers: int = 1, progress=None) -> list[dict]:
    """Empirical power per (design, n, delta1, intervention): the fraction
    of replicates whose bootstrap interval excludes zero."""
    out = []
    for cell in power_cells(spec):
        d1 = cell.targets[0]
        recs: list[dict] = []
        for rr in _replicate_stream(cell, workers):
            recs.extend(rr)
        for k in range(1, cell.m + 1):
            ok = [x for x in recs if x["intervention"] == k and x["ok"]]
            rej = np.array([x["ci_low"] > 0 or x["ci_high"] < 0 for x in ok])
            p = float(rej.mean())
            out.append({
                "design": cell.design, "n": cell.n, "delta1": d1,
                "intervention": k, "power": p,
                "mc_se": math.sqrt(max(p * (1 - p), 0.0) / max(len(ok), 1)),
                "n_fail": len(recs) // cell.m - len(ok),
            })
        if progress is not None:
            progress(cell.scenario_id)
    return out


# ---------------------------------------------------------------------------
# presets mirroring the bundled study grids


def preset_scenarios(name: str, *, replicates: int = 500, bootstrap: int = 500,
                     base_seed: int = 20240501,
                     outcomes: tuple[str, ...] | None = None,
                     fits: tuple[str, ...] | None = None,
                     horizons: tuple[int, ...] | None = None) -> list[ScenarioSpec]:
    """Scenario lists for the four bias/coverage tables.

    table1/table2: concurrent design, small/large effects; table3/table4:
    the augmented factorial, small/large effects.  The factorial stagger is
    1 period at T=5 and 3 periods at T=11.
    """
    table = {
        "table1": ("concurrent", "small"),
        "table2": ("concurrent", "large"),
        "table3": ("factorial-augmented", "small"),
        "table4": ("factorial-augmented", "large"),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}")
    design, regime = table[name]
    outcomes = outcomes or ("A", "B1", "B2", "B3", "B4")
    fits = fits or ("A", "B", "C")
    horizons = horizons or (5, 11)
    specs = []
    for T in horizons:
        for outcome in outcomes:
            specs.append(ScenarioSpec(
                scenario_id=f"{name}-T{T}-{outcome}",
                design=design, T=T, n=30, outcome_model=outcome, regime=regime,
                fit_models=tuple(fits), replicates=replicates, bootstrap=bootstrap,
                base_seed=base_seed, offset=1 if T == 5 else 3))
    return specs


def preset_power_grid(name: str = "sim2", *, replicates: int = 500, bootstrap: int = 500,
                      base_seed: int = 20240502,
                      n_values: tuple[int, ...] | None = None,
                      delta1_values: tuple[float, ...] | None = None) -> PowerSpec:
    if name != "sim2":
        raise ValueError(f"unknown power preset {name!r}")
    kwargs = {}
    if n_values is not None:
        kwargs["n_values"] = tuple(n_values)
    if delta1_values is not None:
        kwargs["delta1_values"] = tuple(delta1_values)
    return PowerSpec(replicates=replicates, bootstrap=bootstrap, base_seed=base_seed,
                     **kwargs)


# ---------------------------------------------------------------------------
# CSV emission

_REPORT_FIELDS = ["scenario_id", "design", "T", "n", "outcome_model", "fit_model",
                  "intervention", "truth", "bias", "sd", "coverage_pct", "ci_length",
                  "mean_se", "mc_se_bias", "mc_se_coverage", "n_fail"]


def report_to_csv(reports: list[StudyReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, _REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.rows:
            w.writerow({k: getattr(row, k) for k in _REPORT_FIELDS})
    return buf.getvalue()


def power_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["design", "n", "delta1", "intervention", "power", "mc_se"],
                       lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def replicates_to_csv(report: StudyReport) -> str:
    buf = io.StringIO()
    fields = ["scenario_id", "replicate", "fit_model", "intervention", "delta_hat",
              "se", "ci_low", "ci_high", "boot_fail", "ok"]
    w = csv.DictWriter(buf, fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for rec in report.replicate_records:
        w.writerow({"scenario_id": report.spec.scenario_id, **rec})
    return buf.getvalue()


def write_outputs(reports: list[StudyReport], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as f:
        f.write(report_to_csv(reports))
    for rep in reports:
        path = os.path.join(out_dir, f"replicates-{rep.spec.scenario_id}.csv")
        with open(path, "w") as f:
            f.write(replicates_to_csv(rep))
