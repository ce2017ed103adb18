"""Command-line front end.

Subcommands: ``design`` (build/inspect layouts), ``bias`` (exact expectation
of the constant-effect estimator over a grid), ``fit`` (analyse a dataset
CSV), ``study`` (bias/coverage scenario grids), and ``power`` (power
curves).  Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bias import DegenerateWeights, bias_curve_table, bias_table_csv
from .curves import EffectCurve, regime_parameters
from .design import (DesignError, ascii_grid, build_layout, check_identifiability,
                     layout_from_json, layout_to_json)
from .fit import FitError, IdentifiabilityError, bootstrap_ci, fit_reml
from .simulate import DatasetFormatError, dataset_from_csv
from .study import (PowerSpec, power_to_csv, preset_power_grid, preset_scenarios,
                    report_to_csv, replicates_to_csv, run_power, run_scenario)

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def _default_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("SWEDGE_SEED")
    return int(env) if env else 20240101


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(path, "w") as f:
            f.write(text)


# ---------------------------------------------------------------------------


def cmd_design(args) -> int:
    layout = build_layout(args.kind, args.T, args.m, offset=args.offset,
                          augment=args.augment, replicates=args.replicates)
    print(ascii_grid(layout))
    for model in ("A", "B"):
        rep = check_identifiability(layout, model)
        status = "identifiable" if rep.identifiable else \
            f"NOT identifiable (missing: {', '.join(rep.deficient_combinations)})"
        print(f"model {model}: {status}")
    if args.out:
        _write(args.out, layout_to_json(layout))
        print(f"layout written to {args.out}")
    return 0


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


# bias-curve figure presets: design geometry, horizon, and the design scalar
_BIAS_PRESETS = {
    "fig5": {"design": "concurrent", "T": 11, "offset": 1, "b": 1 / 11},
    "fig7": {"design": "factorial", "T": 11, "offset": 3, "b": 1 / 11},
}


def cmd_bias(args) -> int:
    if args.preset:
        preset = _BIAS_PRESETS[args.preset]
        args.design, args.T, args.offset = preset["design"], preset["T"], preset["offset"]
        args.m = 2
        if args.b is None:
            args.b = repr(preset["b"])
    if args.T is None:
        raise DesignError("need --T (or a --preset that sets it)")
    if args.b is None:
        args.b = repr(1 / args.T)
    layout = build_layout(args.design, args.T, args.m, offset=args.offset,
                          augment=args.augment)
    b_values = _parse_floats(args.b)
    if args.delta:
        deltas = _parse_floats(args.delta)
        q = layout.T - 1
        if len(deltas) != layout.m * q:
            raise DesignError(f"--delta needs {layout.m * q} values")
        curve = EffectCurve.custom(layout.T, np.asarray(deltas).reshape(layout.m, q))
        curves = {"custom": curve}
    else:
        pars = regime_parameters(args.regime, layout.T)
        curves = {fam: EffectCurve.from_outcome_model(fam, layout.T, pars["targets"],
                                                      low=pars["low"], high=pars["high"])
                  for fam in args.families.split(",")}
    rows = bias_curve_table({args.design: layout}, b_values, curves)
    if args.format == "json":
        _write(args.out, json.dumps(rows, indent=2))
    else:
        _write(args.out, bias_table_csv(rows))
    if args.plot:
        from .plots import bias_curve_svg
        bias_curve_svg(layout, b_values[0], curves, args.plot)
        print(f"plot written to {args.plot}", file=sys.stderr)
    return 0


def cmd_fit(args) -> int:
    with open(args.data) as f:
        dataset = dataset_from_csv(f.read())
    with open(args.layout) as f:
        layout = layout_from_json(f.read())
    if dataset.m != layout.m:
        raise DatasetFormatError("dataset and layout disagree on the number of interventions")
    sizes = dataset.cell_sizes()
    if sizes.shape != (layout.I, layout.T):
        raise DatasetFormatError(
            f"dataset covers {sizes.shape[0]} clusters x {sizes.shape[1]} periods, "
            f"layout expects {layout.I} x {layout.T}")
    for i in range(layout.I):
        for k in range(layout.m):
            on = dataset.x[dataset.cluster == i + 1, k].astype(bool)
            periods = dataset.period[dataset.cluster == i + 1][on]
            start = layout.starts[i][k]
            expect = set(range(start, layout.T + 1)) if start else set()
            if set(periods.tolist()) != expect:
                raise DatasetFormatError(
                    f"treatment indicators for cluster {i + 1}, intervention {k + 1} "
                    "do not match the layout")
    fit = fit_reml(dataset, layout, args.model, reml=not args.ml)
    ci = None
    if args.bootstrap:
        seed = _default_seed(args.seed)
        boot = bootstrap_ci(dataset, layout, args.model, args.bootstrap,
                            args.level, seed, reml=not args.ml)
        ci = boot.ci
    _write(args.out, fit.to_json(ci=ci))
    return 0


def _load_config(path: str, cls):
    """Instantiate a spec dataclass from a JSON object, rejecting unknown keys."""
    import dataclasses
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}; allowed: {sorted(allowed)}")
    for key in ("fit_models", "targets", "linear_range", "designs", "n_values",
                "delta1_values"):
        if key in doc and isinstance(doc[key], list):
            doc[key] = tuple(doc[key])
    return cls(**doc)


def cmd_study(args) -> int:
    seed = _default_seed(args.seed)
    if args.config:
        from .study import ScenarioSpec
        with open(args.config) as f:
            doc = json.load(f)
        if not isinstance(doc, dict) or "scenarios" not in doc:
            raise ValueError('study config must be an object with a "scenarios" list')
        import dataclasses
        allowed = {f.name for f in dataclasses.fields(ScenarioSpec)}
        specs = []
        for entry in doc["scenarios"]:
            unknown = set(entry) - allowed
            if unknown:
                raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
            for key in ("fit_models", "targets", "linear_range"):
                if key in entry and isinstance(entry[key], list):
                    entry[key] = tuple(entry[key])
            specs.append(ScenarioSpec(**entry))
    else:
        if not args.preset:
            raise ValueError("need --preset or --config")
        outcomes = tuple(args.outcomes.split(",")) if args.outcomes else None
        fits = tuple(args.fits.split(",")) if args.fits else None
        horizons = tuple(int(v) for v in args.horizons.split(",")) if args.horizons else None
        specs = preset_scenarios(args.preset, replicates=args.replicates,
                                 bootstrap=args.bootstrap, base_seed=seed,
                                 outcomes=outcomes, fits=fits, horizons=horizons)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for spec in specs:
        marker = os.path.join(out_dir, f"replicates-{spec.scenario_id}.csv")
        if args.resume and os.path.exists(marker):
            print(f"skipping {spec.scenario_id} (already done)", file=sys.stderr)
            continue
        print(f"running {spec.scenario_id} "
              f"(R={spec.replicates}, B={spec.bootstrap})", file=sys.stderr)
        report = run_scenario(spec, workers=args.workers)
        reports.append(report)
        with open(marker, "w") as f:
            f.write(replicates_to_csv(report))
        with open(os.path.join(out_dir, f"report-{spec.scenario_id}.csv"), "w") as f:
            f.write(report_to_csv([report]))
    with open(os.path.join(out_dir, "report.csv"), "w") as f:
        f.write(report_to_csv(reports))
    if args.format == "json":
        rows = [row.__dict__ for rep in reports for row in rep.rows]
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(rows, f, indent=2)
    print(f"reports written to {out_dir}")
    return 0


def cmd_power(args) -> int:
    seed = _default_seed(args.seed)
    if args.config:
        spec = _load_config(args.config, PowerSpec)
    else:
        n_values = tuple(int(v) for v in args.n.split(",")) if args.n else None
        d1 = tuple(float(v) for v in args.delta1.split(",")) if args.delta1 else None
        spec = preset_power_grid(args.preset, replicates=args.replicates,
                                 bootstrap=args.bootstrap, base_seed=seed,
                                 n_values=n_values, delta1_values=d1)
    rows = run_power(spec, workers=args.workers,
                     progress=lambda sid: print(f"done {sid}", file=sys.stderr))
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "power.csv")
    with open(path, "w") as f:
        f.write(power_to_csv(rows))
    if args.format == "json":
        path = os.path.join(args.out_dir, "power.json")
        with open(path, "w") as f:
            json.dump(rows, f, indent=2)
    print(f"power table written to {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swedge",
                                description="multi-intervention stepped-wedge designs: "
                                            "bias, fitting, and simulation studies")
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=None,
                             help="base seed (falls back to SWEDGE_SEED, then a fixed default)")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", parents=[seed_parent],
                       help="build a layout, print its grid, export JSON")
    d.add_argument("--kind", required=True,
                   choices=["single", "concurrent", "supplementation", "factorial",
                            "factorial-augmented"])
    d.add_argument("--T", type=int, required=True)
    d.add_argument("--m", type=int, default=None)
    d.add_argument("--offset", type=int, default=1)
    d.add_argument("--augment", action="store_true")
    d.add_argument("--replicates", type=int, default=1,
                   help="clusters per sequence")
    d.add_argument("--out", default=None, help="layout JSON path")
    d.set_defaults(func=cmd_design)

    b = sub.add_parser("bias", parents=[seed_parent], help="expectation of the constant-effect estimator")
    b.add_argument("--preset", default=None, choices=sorted(_BIAS_PRESETS),
                   help="bundled figure grids (design, horizon, and b)")
    b.add_argument("--design", default="concurrent",
                   choices=["single", "concurrent", "factorial", "factorial-augmented"])
    b.add_argument("--T", type=int, default=None)
    b.add_argument("--m", type=int, default=None)
    b.add_argument("--offset", type=int, default=1)
    b.add_argument("--augment", action="store_true")
    b.add_argument("--b", default=None,
                   help="design scalar values, comma separated (default 1/T)")
    b.add_argument("--format", default="csv", choices=["csv", "json"])
    b.add_argument("--families", default="A,B1,B2,B3,B4")
    b.add_argument("--regime", default="small", choices=["small", "large"])
    b.add_argument("--delta", default=None,
                   help="explicit stacked effect vector, comma separated")
    b.add_argument("--out", default=None, help="CSV path (default stdout)")
    b.add_argument("--plot", default=None, help="SVG path for curve plots")
    b.set_defaults(func=cmd_bias)

    f = sub.add_parser("fit", parents=[seed_parent], help="fit a model to a dataset CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--layout", required=True)
    f.add_argument("--model", required=True, choices=["A", "B", "C"])
    f.add_argument("--bootstrap", type=int, default=0,
                   help="bootstrap resamples for the percentile interval")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--ml", action="store_true", help="maximum likelihood instead of REML")
    f.add_argument("--out", default=None, help="result JSON path (default stdout)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("study", parents=[seed_parent], help="run a bias/coverage scenario grid")
    s.add_argument("--preset", default=None,
                   choices=["table1", "table2", "table3", "table4"])
    s.add_argument("--config", default=None,
                   help="JSON scenario list instead of a preset")
    s.add_argument("--replicates", type=int, default=500)
    s.add_argument("--bootstrap", type=int, default=500)
    s.add_argument("--outcomes", default=None, help="subset, e.g. A,B2")
    s.add_argument("--fits", default=None, help="subset, e.g. A,B")
    s.add_argument("--horizons", default=None, help="subset of 5,11")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", default="swedge-out")
    s.add_argument("--format", default="csv", choices=["csv", "json"])
    s.add_argument("--resume", action="store_true",
                   help="skip scenarios with existing replicate files")
    s.set_defaults(func=cmd_study)

    w = sub.add_parser("power", parents=[seed_parent], help="run the power comparison grid")
    w.add_argument("--preset", default="sim2", choices=["sim2"])
    w.add_argument("--config", default=None, help="JSON power spec instead of a preset")
    w.add_argument("--replicates", type=int, default=500)
    w.add_argument("--bootstrap", type=int, default=500)
    w.add_argument("--n", default=None, help="cluster-period sizes, e.g. 30,100")
    w.add_argument("--delta1", default=None, help="first-intervention averages")
    w.add_argument("--workers", type=int, default=1)
    w.add_argument("--out-dir", default="swedge-out")
    w.add_argument("--format", default="csv", choices=["csv", "json"])
    w.set_defaults(func=cmd_power)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "m", None) is None and hasattr(args, "m"):
        args.m = 1 if getattr(args, "kind", None) == "single" or \
            getattr(args, "design", None) == "single" else 2
    try:
        return args.func(args)
    except (DesignError, DatasetFormatError, IdentifiabilityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FitError, DegenerateWeights, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
