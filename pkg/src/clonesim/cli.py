"""Command-line front end: simulate, report, fit, and sweep.

Configuration lives in a YAML document whose sections mirror the library
types; every key is optional and unknown keys are rejected.  All numeric
output uses 17-significant-digit scientific notation so repeated runs diff
cleanly.

Exit codes: 0 success, 2 configuration or data error, 3 solver failure,
4 fit did not converge (the report is still written).
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dataclass_fields

import numpy as np
import yaml

from . import fitting as fitmod
from . import scenarios
from .dde import IntegrationError
from .kernel import AntigenSupplySpec, ModelParams, NaiveSupplySpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_NO_CONVERGENCE = 4

PRESETS = ("experiment1", "experiment2", "experiment3", "custom")

_PARAM_FIELDS = tuple(f.name for f in dataclass_fields(ModelParams))
_INT_PARAMS = ("M", "K")


class ConfigError(ValueError):
    """Configuration file or flag problem."""


def fmt(x) -> str:
    """Full-precision scientific notation (17 significant digits)."""
    return f"{float(x):.16e}"


def worker_count() -> int:
    """Worker cap from CLONESIM_THREADS; defaults to 1 (sequential)."""
    raw = os.environ.get("CLONESIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CLONESIM_THREADS must be an integer, got {raw!r}")
    return max(1, n)


# ---------------------------------------------------------------------------
# configuration document


def _check_keys(section, mapping, allowed):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section {section!r}; "
                          f"allowed: {sorted(allowed)}")


DEFAULT_CONFIG = {
    "params": {},
    "scenario": {"preset": "experiment1", "n0": 8.5, "group": "i"},
    "solver": {"max_step": None, "backend": "fast", "richardson_check": False,
               "richardson_rtol": 1e-4},
    "output": {"grid_step": 0.5, "path": None},
    "seed": 0,
    "fit": {"data": None, "free": list(fitmod.FREE_PARAMS), "bounds": {},
            "initial": {}, "max_nfev": 400, "central_differences": False,
            "step_divisor": fitmod.FIT_STEP_DIVISOR},
}


def load_config(path=None) -> dict:
    """Parse and validate a YAML config, filling defaults for absent keys."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
    _check_keys("<root>", doc, DEFAULT_CONFIG)

    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
    cfg["scenario"] = dict(DEFAULT_CONFIG["scenario"])

    params = doc.get("params", {})
    _check_keys("params", params, _PARAM_FIELDS)
    cfg["params"] = {k: (int(v) if k in _INT_PARAMS else float(v)) for k, v in params.items()}

    scen = doc.get("scenario", {})
    _check_keys("scenario", scen, ("preset", "n0", "group", "cohorts", "antigen",
                                   "horizon", "observation_times", "initial_antigen"))
    cfg["scenario"].update(scen)
    if cfg["scenario"]["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['scenario']['preset']!r}; "
                          f"choose from {PRESETS}")

    solver = doc.get("solver", {})
    _check_keys("solver", solver, cfg["solver"])
    cfg["solver"].update(solver)
    if cfg["solver"]["backend"] not in ("fast", "reference"):
        raise ConfigError("solver.backend must be 'fast' or 'reference'")

    output = doc.get("output", {})
    _check_keys("output", output, cfg["output"])
    cfg["output"].update(output)
    if cfg["output"]["grid_step"] is not None and float(cfg["output"]["grid_step"]) <= 0:
        raise ConfigError("output.grid_step must be positive")

    fit_sec = doc.get("fit", {})
    _check_keys("fit", fit_sec, cfg["fit"])
    cfg["fit"].update(fit_sec)

    if "seed" in doc:
        cfg["seed"] = int(doc["seed"])
    return cfg


def dump_config(cfg) -> str:
    """Serialise a resolved config; re-parsing the dump reproduces it."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def model_params(cfg) -> ModelParams:
    try:
        return ModelParams(**cfg["params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model parameters: {exc}") from None


def _cohort_from_mapping(entry) -> scenarios.CohortSpec:
    _check_keys("scenario.cohorts[]", entry,
                ("label", "n0", "dose", "t_c", "offset", "p"))
    if "label" not in entry:
        raise ConfigError("each cohort needs a label")
    supply = None
    if "dose" in entry:
        supply = NaiveSupplySpec(
            dose=float(entry["dose"]), t_c=float(entry.get("t_c", 0.0)),
            offset=float(entry.get("offset", 3.0)), p=float(entry.get("p", 0.75)))
    return scenarios.CohortSpec(label=str(entry["label"]),
                                n0=float(entry.get("n0", 0.0)), supply=supply)


def build_scenario(cfg, params: ModelParams) -> scenarios.ScenarioSpec:
    """Construct the scenario a config describes."""
    scen = cfg["scenario"]
    preset = scen["preset"]
    try:
        if preset == "experiment1":
            spec = scenarios.build_experiment1(float(scen.get("n0", 8.5)), params)
        elif preset == "experiment2":
            spec = scenarios.build_experiment2(scen.get("group", "i"), params)
        elif preset == "experiment3":
            spec = scenarios.build_experiment3(scen.get("group", "i"), params)
        else:
            if "cohorts" not in scen or not scen["cohorts"]:
                raise ConfigError("custom scenarios need scenario.cohorts")
            antigen_doc = scen.get("antigen", {})
            _check_keys("scenario.antigen", antigen_doc,
                        ("dose", "t_k", "onset", "alpha", "beta", "gamma"))
            antigen = AntigenSupplySpec(**{k: float(v) for k, v in antigen_doc.items()})
            horizon = float(scen.get("horizon", 42 * scenarios.DAY))
            obs = scen.get("observation_times") or [horizon]
            spec = scenarios.ScenarioSpec(
                cohorts=tuple(_cohort_from_mapping(c) for c in scen["cohorts"]),
                antigen=antigen, horizon=horizon,
                observation_times=tuple(float(t) for t in obs),
                params=params,
                initial_antigen=float(scen.get("initial_antigen", 0.0)),
                label=preset)
        # antigen/horizon/observation overrides apply to presets as well
        if preset != "custom":
            changes = {}
            if "antigen" in scen:
                antigen_doc = dict(scen["antigen"])
                _check_keys("scenario.antigen", antigen_doc,
                            ("dose", "t_k", "onset", "alpha", "beta", "gamma"))
                base = spec.antigen
                changes["antigen"] = AntigenSupplySpec(
                    dose=float(antigen_doc.get("dose", base.dose)),
                    t_k=float(antigen_doc.get("t_k", base.t_k)),
                    onset=float(antigen_doc.get("onset", base.onset)),
                    alpha=float(antigen_doc.get("alpha", base.alpha)),
                    beta=float(antigen_doc.get("beta", base.beta)),
                    gamma=float(antigen_doc.get("gamma", base.gamma)))
            if "horizon" in scen:
                changes["horizon"] = float(scen["horizon"])
            if "observation_times" in scen:
                changes["observation_times"] = tuple(float(t) for t in scen["observation_times"])
            if "initial_antigen" in scen:
                changes["initial_antigen"] = float(scen["initial_antigen"])
            if changes:
                from dataclasses import replace
                spec = replace(spec, **changes)
        return spec
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _run_spec(spec, cfg):
    solver = cfg["solver"]
    return scenarios.run(
        spec,
        max_step=None if solver["max_step"] is None else float(solver["max_step"]),
        backend=solver["backend"],
        check=bool(solver["richardson_check"]),
        rtol=float(solver["richardson_rtol"]))


# ---------------------------------------------------------------------------
# commands


def _out_stream(path):
    return open(path, "w") if path else sys.stdout


def cmd_simulate(cfg, out_path=None) -> int:
    """Write the trajectory table on the output grid."""
    params = model_params(cfg)
    spec = build_scenario(cfg, params)
    result = _run_spec(spec, cfg)

    grid_step = float(cfg["output"]["grid_step"])
    t0, t1 = result.trajectory.t0, spec.horizon
    times = np.arange(t0, t1 + 0.5 * grid_step, grid_step)
    times = np.unique(np.concatenate([times, np.asarray(spec.observation_times),
                                      [t0, t1]]))
    times = times[(times >= t0) & (times <= t1)]

    lay = result.layout
    multi = spec.n_cohorts > 1
    columns = ["time_h", "antigen"]
    for c, coh in enumerate(spec.cohorts):
        prefix = f"{coh.label}." if multi else ""
        columns += [f"{prefix}N"]
        columns += [f"{prefix}T_{i}" for i in range(1, params.K + 1)]
        columns += [f"{prefix}D_N"]
        columns += [f"{prefix}D_{i}" for i in range(1, params.K)]
        columns += [f"{prefix}total"]

    path = out_path if out_path is not None else cfg["output"]["path"]
    stream = _out_stream(path)
    try:
        print(",".join(columns), file=stream)
        for t in times:
            y = result.state_vector(t)
            row = [fmt(t), fmt(y[0])]
            for c in range(spec.n_cohorts):
                row.append(fmt(y[lay.naive(c)]))
                row.extend(fmt(v) for v in y[lay.t_cells(c)])
                row.append(fmt(y[lay.transit_first(c)]))
                row.extend(fmt(v) for v in y[lay.transit(c)])
                row.append(fmt(lay.total(y, c)))
            print(",".join(row), file=stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


def _report_rows_experiment1(cfg, params):
    results = {}
    for n0 in scenarios.EXPERIMENT1_DOSES:
        sub = {**cfg, "scenario": {**cfg["scenario"], "preset": "experiment1", "n0": n0}}
        results[n0] = _run_spec(build_scenario(sub, params), cfg)
    rows = []
    days = (0.0, 7 * scenarios.DAY, 42 * scenarios.DAY)
    for n0, res in results.items():
        for t in days:
            rows.append(("total_cells", f"{n0:g}", t, "", res.total(t)))
    for t in days:
        rows.append(("fold_difference", "94.7/0.1", t, "",
                     scenarios.fold_difference(results, t)))
    rec = {n0: scenarios.recruitment_fraction(res) for n0, res in results.items()}
    for n0, pct in rec.items():
        rows.append(("recruitment_pct", f"{n0:g}", 42 * scenarios.DAY, "", pct))
    line = scenarios.recruitment_regression(rec)
    rows.append(("recruitment_slope_per_log10_dose", "all", "", "", line.slope))
    rows.append(("recruitment_regression_r_squared", "all", "", "", line.r_squared))
    return rows


def _report_rows_two_cohort(cfg, params, experiment):
    build = scenarios.build_experiment2 if experiment == 2 else scenarios.build_experiment3
    rows = []
    for group in scenarios.GROUPS:
        sub = {**cfg, "scenario": {**cfg["scenario"], "preset": f"experiment{experiment}",
                                   "group": group}}
        res = _run_spec(build_scenario(sub, params), cfg)
        horizon = res.spec.horizon
        rows.append(("recruitment_pct", group, horizon, "",
                     scenarios.recruitment_fraction(res)))
        profile = scenarios.division_profile(res, horizon)
        for i, share in enumerate(profile, start=1):
            rows.append(("division_profile_pct", group, horizon, i, share))
        totals = scenarios.cohort_activated_totals(res, horizon)
        for c, coh in enumerate(res.spec.cohorts):
            rows.append(("activated_total", f"{group}:{coh.label}", horizon, "", totals[c]))
    return rows


def cmd_report(cfg, experiment, out_path=None) -> int:
    """Emit the summary table for one experiment."""
    params = model_params(cfg)
    if experiment == "experiment1":
        rows = _report_rows_experiment1(cfg, params)
    elif experiment == "experiment2":
        rows = _report_rows_two_cohort(cfg, params, 2)
    elif experiment == "experiment3":
        rows = _report_rows_two_cohort(cfg, params, 3)
    else:
        raise ConfigError(f"unknown experiment tag {experiment!r}; "
                          "use experiment1|experiment2|experiment3")
    path = out_path if out_path is not None else cfg["output"]["path"]
    stream = _out_stream(path)
    try:
        print("metric,arm,time_h,division,value", file=stream)
        for metric, arm, t, division, value in rows:
            tcol = fmt(t) if t != "" else ""
            print(f"{metric},{arm},{tcol},{division},{fmt(value)}", file=stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


def cmd_fit(cfg, data_path, free_override=None, out_path=None) -> int:
    """Run the simultaneous fit against a dataset file and write the report."""
    fit_cfg = cfg["fit"]
    path = data_path or fit_cfg["data"]
    if not path:
        raise ConfigError("fit needs a data file (fit.data or --data)")
    dataset = fitmod.load_dataset(path)
    if all(rec.weight == 1.0 for rec in dataset):
        dataset = dataset.with_block_weights()

    free = tuple(free_override or fit_cfg["free"])
    bounds = {k: (float(v[0]), float(v[1])) for k, v in (fit_cfg["bounds"] or {}).items()}
    initial = {k: float(v) for k, v in (fit_cfg["initial"] or {}).items()}
    control = fitmod.FitControl(
        step_divisor=int(fit_cfg["step_divisor"]),
        max_step=None if cfg["solver"]["max_step"] is None else float(cfg["solver"]["max_step"]),
        max_nfev=int(fit_cfg["max_nfev"]),
        central_differences=bool(fit_cfg["central_differences"]),
        backend=cfg["solver"]["backend"])
    try:
        problem = fitmod.FitProblem(data=dataset, free=free, fixed=model_params(cfg),
                                    bounds=bounds or None, initial=initial or None,
                                    control=control)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    result = fitmod.fit(problem)

    stream = _out_stream(out_path if out_path is not None else cfg["output"]["path"])
    try:
        print("section,name,value", file=stream)
        for name in fitmod.FREE_PARAMS:
            if name in result.estimates:
                print(f"estimate,{name},{fmt(result.estimates[name])}", file=stream)
            else:
                print(f"fixed,{name},{fmt(getattr(result.params, name))}", file=stream)
        for name, (lo, hi) in result.intervals.items():
            print(f"interval_low,{name},{fmt(lo)}", file=stream)
            print(f"interval_high,{name},{fmt(hi)}", file=stream)
        print(f"diagnostic,residual_norm,{fmt(result.residual_norm)}", file=stream)
        print(f"diagnostic,cost,{fmt(result.cost)}", file=stream)
        print(f"diagnostic,nfev,{result.nfev}", file=stream)
        print(f"diagnostic,njev,{result.njev}", file=stream)
        print(f"diagnostic,status,{result.status}", file=stream)
        print(f"diagnostic,optimality,{fmt(result.optimality)}", file=stream)
        print(f"diagnostic,solver_failures,{result.solver_failures}", file=stream)
        print(f"diagnostic,message,{result.message}", file=stream)
        for i, cost in enumerate(result.eval_log):
            print(f"evaluation,{i},{fmt(cost)}", file=stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK if result.success else EXIT_NO_CONVERGENCE


def _sweep_point(args):
    cfg, assignment = args
    sub = {**cfg, "params": {**cfg["params"], **assignment}}
    params = model_params(sub)
    spec = build_scenario(sub, params)
    result = _run_spec(spec, sub)
    total = result.total(spec.horizon)
    rec = scenarios.recruitment_fraction(result)
    return assignment, total, rec


def cmd_sweep(cfg, sweep_params, out_path=None) -> int:
    """Cartesian product over parameter value lists; one summary row each."""
    if not sweep_params:
        raise ConfigError("sweep needs at least one --param KEY=V1,V2,...")
    names = sorted(sweep_params)
    grids = [sweep_params[n] for n in names]
    points = [dict(zip(names, combo)) for combo in itertools.product(*grids)]

    workers = worker_count()
    jobs = [(cfg, pt) for pt in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_point, jobs))
    else:
        outcomes = [_sweep_point(job) for job in jobs]

    stream = _out_stream(out_path if out_path is not None else cfg["output"]["path"])
    try:
        print(",".join(names + ["total_at_horizon", "recruitment_pct"]), file=stream)
        for assignment, total, rec in outcomes:
            row = [fmt(assignment[n]) for n in names] + [fmt(total), fmt(rec)]
            print(",".join(row), file=stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _parse_param_overrides(pairs, allow_lists=False):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--param expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _PARAM_FIELDS:
            raise ConfigError(f"unknown model parameter {key!r}; allowed: {_PARAM_FIELDS}")
        caster = int if key in _INT_PARAMS else float
        try:
            values = [caster(v) for v in raw.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from None
        if allow_lists:
            out[key] = values
        else:
            if len(values) != 1:
                raise ConfigError(f"--param {key} expects a single value here")
            out[key] = values[0]
    return out


def _apply_common_overrides(cfg, args, parse_params=True):
    if getattr(args, "preset", None):
        cfg["scenario"]["preset"] = args.preset
    if getattr(args, "group", None):
        cfg["scenario"]["group"] = args.group
    if getattr(args, "n0", None) is not None:
        cfg["scenario"]["n0"] = args.n0
    if getattr(args, "antigen_dose", None) is not None:
        antigen = dict(cfg["scenario"].get("antigen", {}) or {})
        antigen["dose"] = args.antigen_dose
        cfg["scenario"]["antigen"] = antigen
    if getattr(args, "step_h", None) is not None:
        cfg["solver"]["max_step"] = args.step_h
    if getattr(args, "backend", None):
        cfg["solver"]["backend"] = args.backend
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "grid_step", None) is not None:
        cfg["output"]["grid_step"] = args.grid_step
    if parse_params:
        cfg["params"].update(_parse_param_overrides(getattr(args, "param", None)))


def _add_shared_flags(sub):
    sub.add_argument("--config", metavar="PATH", help="YAML configuration file")
    sub.add_argument("--preset", choices=PRESETS)
    sub.add_argument("--group", choices=scenarios.GROUPS)
    sub.add_argument("--n0", type=float, help="experiment-1 initial density")
    sub.add_argument("--antigen-dose", type=float, dest="antigen_dose")
    sub.add_argument("--param", action="append", metavar="KEY=VALUE",
                     help="model parameter override (repeatable)")
    sub.add_argument("--step-h", type=float, dest="step_h", help="solver mesh cap (hours)")
    sub.add_argument("--backend", choices=("fast", "reference"))
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", metavar="PATH", help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clonesim",
        description="Simulate antigen-regulated T cell clonal expansion and fit its parameters.")
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="write a trajectory table")
    _add_shared_flags(sim)
    sim.add_argument("--grid-step", type=float, dest="grid_step",
                     help="output grid spacing in hours (default 0.5)")
    sim.add_argument("--dump-config", action="store_true",
                     help="print the resolved configuration and exit")

    rep = subs.add_parser("report", help="summary numbers for one experiment")
    _add_shared_flags(rep)
    rep.add_argument("experiment", choices=("experiment1", "experiment2", "experiment3"))

    fitp = subs.add_parser("fit", help="simultaneous least-squares parameter fit")
    _add_shared_flags(fitp)
    fitp.add_argument("--data", metavar="PATH", help="dataset CSV")
    fitp.add_argument("--free", metavar="NAMES",
                      help="comma-separated subset of " + ",".join(fitmod.FREE_PARAMS))
    fitp.add_argument("--max-iter", type=int, dest="max_iter",
                      help="cap on residual evaluations")

    swp = subs.add_parser("sweep", help="Cartesian parameter grid of simulations")
    _add_shared_flags(swp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_common_overrides(cfg, args, parse_params=args.command != "sweep")

        if args.command == "simulate":
            if args.dump_config:
                sys.stdout.write(dump_config(cfg))
                return EXIT_OK
            return cmd_simulate(cfg, out_path=args.out)
        if args.command == "report":
            return cmd_report(cfg, args.experiment, out_path=args.out)
        if args.command == "fit":
            if args.max_iter is not None:
                cfg["fit"]["max_nfev"] = args.max_iter
            free = args.free.split(",") if args.free else None
            return cmd_fit(cfg, args.data, free_override=free, out_path=args.out)
        if args.command == "sweep":
            sweep_params = _parse_param_overrides(args.param, allow_lists=True)
            fixed_overrides = {k: v[0] for k, v in sweep_params.items() if len(v) == 1}
            sweep_params = {k: v for k, v in sweep_params.items() if len(v) > 1}
            cfg["params"].update(fixed_overrides)
            return cmd_sweep(cfg, sweep_params, out_path=args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
