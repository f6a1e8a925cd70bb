"""Simultaneous bounded least-squares estimation against multi-experiment data.

A dataset is a flat list of records, each tying an observable (log10 total
count, recruitment percent, or one division-profile entry) to an experiment
arm and a time.  Residuals are weighted differences between model output and
the recorded values; a trust-region-reflective iteration with numerical
Jacobians minimises their sum of squares over any subset of
{r_e, r_N, g, d, tau, s}.  Linearised confidence intervals come from the
residual variance and the Jacobian at the optimum.  A synthetic-data
generator provides the recovery oracle used by the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from . import scenarios
from .dde import IntegrationError
from .kernel import ModelParams

FREE_PARAMS = ("r_e", "r_N", "g", "d", "tau", "s")
OBSERVABLE_KINDS = ("log_count", "recruitment_pct", "profile_pct")

LN10 = math.log(10.0)

# profile entries below this share (percent) are dropped by the synthesiser;
# they are unmeasurable in practice and would otherwise dominate the weights
PROFILE_FLOOR_PCT = 0.5

# simulations during fitting run on a coarser mesh than reporting runs; the
# synthesiser uses the same mesh, so recovery tests compare like with like
FIT_STEP_DIVISOR = 16

_EXPERIMENT_BUILDERS = {
    1: lambda arm, params: scenarios.build_experiment1(float(arm), params),
    2: lambda arm, params: scenarios.build_experiment2(arm, params),
    3: lambda arm, params: scenarios.build_experiment3(arm, params),
}


@dataclass(frozen=True)
class DataRecord:
    """One observation: an observable of one experiment arm at one time."""

    experiment: int     # 1, 2 or 3
    arm: str            # dose label for experiment 1, group tag for 2/3
    kind: str           # one of OBSERVABLE_KINDS
    time: float         # hours
    value: float
    weight: float = 1.0
    division: int = 0   # division number, profile_pct records only

    def __post_init__(self):
        if self.experiment not in _EXPERIMENT_BUILDERS:
            raise ValueError(f"unknown experiment tag {self.experiment!r}")
        if self.kind not in OBSERVABLE_KINDS:
            raise ValueError(f"unknown observable kind {self.kind!r}")
        if not self.weight > 0:
            raise ValueError("record weights must be positive")
        if self.kind == "profile_pct" and self.division < 1:
            raise ValueError("profile records need a division number >= 1")


@dataclass(frozen=True)
class DataSet:
    """An immutable collection of records."""

    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def block_key(self, rec: DataRecord):
        return (rec.experiment, rec.kind)

    def with_block_weights(self) -> "DataSet":
        """Reweight so each (experiment, kind) block counts equally.

        Every record's weight becomes the inverse of its block's record
        count; useful for digitised data without error estimates.
        """
        counts = {}
        for rec in self.records:
            counts[self.block_key(rec)] = counts.get(self.block_key(rec), 0) + 1
        return DataSet(tuple(replace(r, weight=1.0 / counts[self.block_key(r)])
                             for r in self.records))


CSV_FIELDS = ("experiment", "arm", "kind", "time_h", "division", "value", "weight")


def save_dataset(dataset: DataSet, path):
    """Write records as CSV in the documented tabular format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in dataset:
            writer.writerow([r.experiment, r.arm, r.kind, f"{r.time:.16e}",
                             r.division, f"{r.value:.16e}", f"{r.weight:.16e}"])


def load_dataset(path) -> DataSet:
    """Read a dataset CSV; raises ValueError on format problems or no records."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"data file {path} is empty") from None
        if tuple(h.strip() for h in header) != CSV_FIELDS:
            raise ValueError(f"data file {path} must have columns {','.join(CSV_FIELDS)}")
        records = []
        for i, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(CSV_FIELDS):
                raise ValueError(f"{path}:{i}: expected {len(CSV_FIELDS)} columns")
            try:
                records.append(DataRecord(
                    experiment=int(row[0]), arm=row[1].strip(), kind=row[2].strip(),
                    time=float(row[3]), division=int(row[4]), value=float(row[5]),
                    weight=float(row[6])))
            except ValueError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from None
    if not records:
        raise ValueError(f"data file {path} holds no records")
    return DataSet(tuple(records))


@dataclass(frozen=True)
class FitControl:
    """Optimizer and simulation controls for one fit."""

    step_divisor: int = FIT_STEP_DIVISOR   # mesh = min(sigma, tau)/divisor
    max_step: float | None = None          # explicit mesh cap, overrides divisor
    ftol: float = 1e-10
    xtol: float = 1e-10
    gtol: float = 1e-8
    max_nfev: int = 400
    diff_step_scale: float = 1e-6          # finite-difference step 1e-6*(1+|theta|)
    central_differences: bool = False
    penalty: float = 1e6                   # residual filled in when a candidate fails
    backend: str = "fast"
    max_steps_per_run: int = 2_000_000     # candidate rejected beyond this mesh size


def _default_bounds(name: str, fixed: ModelParams):
    hi = 10.0 * getattr(ModelParams(), name)
    if name == "g":
        hi = min(hi, (1.0 - 1e-3) / fixed.M)
    return (1e-6, hi)


@dataclass(frozen=True)
class FitProblem:
    """Free parameters with bounds, the fixed remainder, and the data."""

    data: DataSet
    free: tuple = FREE_PARAMS
    fixed: ModelParams = field(default_factory=ModelParams)
    bounds: dict | None = None
    initial: dict | None = None
    control: FitControl = field(default_factory=FitControl)

    def __post_init__(self):
        if len(self.data) == 0:
            raise ValueError("fit needs at least one data record")
        unknown = [p for p in self.free if p not in FREE_PARAMS]
        if unknown:
            raise ValueError(f"cannot free {unknown}; supported: {FREE_PARAMS}")
        if len(set(self.free)) != len(self.free):
            raise ValueError("free parameter names must be unique")
        for name in self.free:
            lo, hi = self.bounds_for(name)
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy lower < upper")
            x = self.initial_for(name)
            if not lo <= x <= hi:
                raise ValueError(f"initial guess for {name} ({x}) is outside [{lo}, {hi}]")
        horizons = {1: 42 * scenarios.DAY, 2: 84.0, 3: 132.0}
        seen_arms = set()
        for rec in self.data:
            if rec.time > horizons[rec.experiment] + 1e-9:
                raise ValueError(
                    f"record time {rec.time} exceeds the experiment-{rec.experiment} horizon")
            if rec.kind == "profile_pct" and rec.division > self.fixed.K:
                raise ValueError("profile division exceeds the truncation depth K")
            key = (rec.experiment, rec.arm)
            if key not in seen_arms:
                seen_arms.add(key)
                try:
                    _EXPERIMENT_BUILDERS[rec.experiment](rec.arm, self.fixed)
                except ValueError as exc:
                    raise ValueError(
                        f"record arm {rec.arm!r} is not valid for experiment "
                        f"{rec.experiment}: {exc}") from None

    def bounds_for(self, name):
        if self.bounds and name in self.bounds:
            lo, hi = self.bounds[name]
            return (float(lo), float(hi))
        return _default_bounds(name, self.fixed)

    def initial_for(self, name) -> float:
        if self.initial and name in self.initial:
            return float(self.initial[name])
        return float(getattr(self.fixed, name))

    def initial_vector(self) -> np.ndarray:
        return np.array([self.initial_for(name) for name in self.free])

    def bound_arrays(self):
        lo = np.array([self.bounds_for(n)[0] for n in self.free])
        hi = np.array([self.bounds_for(n)[1] for n in self.free])
        return lo, hi

    def params_at(self, x) -> ModelParams:
        return self.fixed.with_values(**{n: float(v) for n, v in zip(self.free, x)})


def _fit_max_step(params: ModelParams, control: FitControl) -> float:
    cap = min(params.sigma, params.tau)
    step = control.max_step if control.max_step is not None else cap / control.step_divisor
    return min(step, cap)


def _simulate_arm(experiment, arm, params, control: FitControl):
    spec = _EXPERIMENT_BUILDERS[experiment](arm, params)
    max_step = _fit_max_step(params, control)
    span = spec.horizon - spec.start_time
    if span / max_step > control.max_steps_per_run:
        raise IntegrationError("candidate requires more steps than the fit budget allows")
    return scenarios.run(spec, max_step=max_step, backend=control.backend)


def _record_observable(rec: DataRecord, result) -> float:
    if rec.kind == "log_count":
        total = result.total(rec.time)
        if total <= 0:
            raise IntegrationError("nonpositive total cell count in log-space record")
        return math.log10(total)
    if rec.kind == "recruitment_pct":
        return scenarios.recruitment_fraction(result, cohort=0, t=rec.time)
    profile = scenarios.division_profile(result, rec.time, cohort=0)
    return float(profile[rec.division - 1])


def model_observables(candidate, problem: FitProblem) -> np.ndarray:
    """Model value for every record at a free-parameter vector."""
    params = problem.params_at(candidate)
    runs = {}
    out = np.empty(len(problem.data))
    for i, rec in enumerate(problem.data):
        key = (rec.experiment, rec.arm)
        if key not in runs:
            runs[key] = _simulate_arm(rec.experiment, rec.arm, params, problem.control)
        out[i] = _record_observable(rec, runs[key])
    return out


def residuals_with_flag(candidate, problem: FitProblem):
    """Weighted residual vector and a failure flag.

    A candidate whose simulation fails (nonfinite states, invalid
    parameters, step budget) yields a constant large-penalty vector and
    flag=True instead of raising.
    """
    try:
        obs = model_observables(candidate, problem)
    except (IntegrationError, ValueError):
        return np.full(len(problem.data), problem.control.penalty), True
    res = np.array([rec.weight * (obs[i] - rec.value)
                    for i, rec in enumerate(problem.data)])
    return res, False


def residuals(candidate, problem: FitProblem) -> np.ndarray:
    """Weighted residual vector at a free-parameter vector."""
    return residuals_with_flag(candidate, problem)[0]


@dataclass
class FitResult:
    """Optimizer output: estimates, diagnostics, and interval ingredients."""

    problem: FitProblem
    estimates: dict
    params: ModelParams
    residual_norm: float
    cost: float
    jacobian: np.ndarray | None
    intervals: dict
    success: bool
    status: int
    message: str
    nfev: int
    njev: int
    optimality: float
    solver_failures: int
    eval_log: list
    rank_deficient: bool = False

    @property
    def free(self):
        return self.problem.free

    @property
    def dof(self) -> int:
        return len(self.problem.data) - len(self.estimates)

    @property
    def residual_variance(self) -> float:
        if self.dof <= 0:
            return float("nan")
        return self.residual_norm ** 2 / self.dof


def _make_jacobian(fun, problem: FitProblem):
    """Finite-difference Jacobian with step scale*(1+|theta|) per component."""
    scale = problem.control.diff_step_scale
    central = problem.control.central_differences
    lo, hi = problem.bound_arrays()

    def jac(x, r0=None):
        x = np.asarray(x, dtype=float)
        base = fun(x) if r0 is None else r0
        cols = []
        for j in range(x.size):
            h = scale * (1.0 + abs(x[j]))
            if central and x[j] - h >= lo[j] and x[j] + h <= hi[j]:
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                cols.append((fun(xp) - fun(xm)) / (2.0 * h))
            else:
                step = h if x[j] + h <= hi[j] else -h
                xp = x.copy()
                xp[j] += step
                cols.append((fun(xp) - base) / step)
        return np.column_stack(cols)

    return jac


def fit(problem: FitProblem) -> FitResult:
    """Minimise the weighted sum of squared residuals within bounds.

    Deterministic given the problem; non-convergence is reported through
    `success`/`status`, never raised.
    """
    failures = [0]
    cache = {}
    eval_log = []

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            r, failed = residuals_with_flag(x, problem)
            failures[0] += failed
            if len(cache) > 64:
                cache.clear()
            cache[key] = r
            eval_log.append(float(0.5 * (r @ r)))
        return cache[key]

    if len(problem.free) == 0:
        r = residuals(np.empty(0), problem)
        return FitResult(problem=problem, estimates={}, params=problem.fixed,
                         residual_norm=float(np.linalg.norm(r)), cost=float(0.5 * (r @ r)),
                         jacobian=None, intervals={}, success=True, status=0,
                         message="no free parameters", nfev=1, njev=0,
                         optimality=0.0, solver_failures=failures[0], eval_log=eval_log)

    x0 = problem.initial_vector()
    lo, hi = problem.bound_arrays()
    jac = _make_jacobian(fun, problem)
    x_scale = np.maximum(np.abs(x0), 1e-8)
    ctrl = problem.control
    res = optimize.least_squares(
        fun, x0, jac=jac, bounds=(lo, hi), method="trf", x_scale=x_scale,
        ftol=ctrl.ftol, xtol=ctrl.xtol, gtol=ctrl.gtol, max_nfev=ctrl.max_nfev)

    estimates = {n: float(v) for n, v in zip(problem.free, res.x)}
    result = FitResult(
        problem=problem, estimates=estimates, params=problem.params_at(res.x),
        residual_norm=float(np.linalg.norm(res.fun)), cost=float(res.cost),
        jacobian=np.asarray(res.jac), intervals={}, success=bool(res.status > 0),
        status=int(res.status), message=str(res.message), nfev=int(res.nfev),
        njev=int(res.njev or 0), optimality=float(res.optimality),
        solver_failures=failures[0], eval_log=eval_log)
    if result.dof > 0:
        result.intervals = confidence_intervals(result)
    return result


def confidence_intervals(result: FitResult, level=0.95) -> dict:
    """Per-parameter linearised intervals at the given confidence level.

    Uses the residual variance and (J^T J)^-1 at the optimum; a
    rank-deficient Jacobian yields unbounded intervals and sets the
    `rank_deficient` flag on the result.
    """
    if not 0.0 <= level < 1.0:
        raise ValueError("confidence level must lie in [0, 1)")
    names = result.free
    if not names:
        return {}
    J = result.jacobian
    dof = result.dof
    if J is None or dof <= 0:
        raise ValueError("confidence intervals need a converged fit with dof > 0")
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.size < len(names) or sv[-1] <= sv[0] * 1e-12:
        result.rank_deficient = True
        return {n: (-math.inf, math.inf) for n in names}
    cov = result.residual_variance * np.linalg.inv(J.T @ J)
    tval = stats.t.ppf(0.5 * (1.0 + level), dof)
    out = {}
    for j, n in enumerate(names):
        hw = tval * math.sqrt(max(cov[j, j], 0.0))
        est = result.estimates[n]
        out[n] = (est - hw, est + hw)
    return out


def synthesize_data(params: ModelParams | None = None, noise=0.0, seed=0,
                    control: FitControl | None = None) -> DataSet:
    """Generate the standard multi-experiment dataset from model output.

    Samples log10 total counts at days 0/7/42 for every experiment-1 arm,
    plus recruitment percentages and division profiles at the horizon for
    every experiment-2/3 group.  Multiplicative lognormal noise of relative
    size `noise` is applied; weights are set to the reciprocal noise scale
    of each record (log-count records are weighted by ln 10 so that all
    weighted residuals share the same relative-error units).  Deterministic
    for a given seed.
    """
    params = params or ModelParams()
    control = control or FitControl()
    rng = np.random.default_rng(seed)
    records = []

    def noisy_pct(value):
        return value * math.exp(noise * rng.standard_normal()) if noise > 0 else value

    for n0 in scenarios.EXPERIMENT1_DOSES:
        result = _simulate_arm(1, f"{n0:g}", params, control)
        for t in result.spec.observation_times:
            logv = math.log10(result.total(t))
            if noise > 0:
                logv += noise * rng.standard_normal() / LN10
            records.append(DataRecord(experiment=1, arm=f"{n0:g}", kind="log_count",
                                      time=t, value=logv, weight=LN10))
    for experiment in (2, 3):
        for group in scenarios.GROUPS:
            result = _simulate_arm(experiment, group, params, control)
            t = result.spec.horizon
            rec_pct = scenarios.recruitment_fraction(result, cohort=0, t=t)
            records.append(DataRecord(experiment=experiment, arm=group,
                                      kind="recruitment_pct", time=t,
                                      value=noisy_pct(rec_pct), weight=1.0 / rec_pct))
            profile = scenarios.division_profile(result, t, cohort=0)
            for div in range(1, params.K + 1):
                true = float(profile[div - 1])
                if true < PROFILE_FLOOR_PCT:
                    continue
                records.append(DataRecord(experiment=experiment, arm=group,
                                          kind="profile_pct", time=t, division=div,
                                          value=noisy_pct(true), weight=1.0 / true))
    return DataSet(tuple(records))
