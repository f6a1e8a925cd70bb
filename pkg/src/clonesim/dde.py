"""Method-of-steps integrator for systems with multiple constant delays.

The solver advances a classical 4-stage Runge-Kutta scheme on a uniform mesh
whose step never exceeds the smallest delay, so every delayed lookup lands in
already-accepted territory (or in the user-supplied history for times before
the start).  A cubic Hermite interpolant built from the stored node states
and derivatives provides dense output, both for the delayed lookups during
integration and for querying the finished trajectory at arbitrary times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when a solve cannot proceed or fails its accuracy check."""


@dataclass(frozen=True)
class DelaySet:
    """Strictly positive, distinct constant lags."""

    delays: tuple

    def __post_init__(self):
        if len(self.delays) == 0:
            raise ValueError("at least one delay is required")
        if any(d <= 0 for d in self.delays):
            raise ValueError("delays must be strictly positive")
        if len(set(self.delays)) != len(self.delays):
            raise ValueError("delays must be distinct")

    @property
    def min_delay(self) -> float:
        return min(self.delays)


@dataclass(frozen=True)
class StepControl:
    """Solver control: mesh resolution and the self-consistency tolerance.

    `max_step` caps the mesh spacing (the actual step divides the span
    evenly).  When `check` is set, the solve is repeated at half the step
    and the two trajectories must agree to `rtol` in a scaled max norm.
    """

    max_step: float
    rtol: float = 1e-6
    check: bool = False

    def __post_init__(self):
        if self.max_step <= 0:
            raise ValueError("max_step must be positive")
        if self.rtol <= 0:
            raise ValueError("rtol must be positive")


class DenseTrajectory:
    """Continuous-in-time solution on [t0, t1] with history passthrough.

    Stores the uniform accepted mesh, the state and derivative at every
    node, and evaluates a cubic Hermite interpolant in between.  Queries
    before t0 are answered by the history function.
    """

    def __init__(self, mesh, states, derivs, history):
        mesh = np.asarray(mesh, dtype=float)
        states = np.asarray(states, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        if mesh.ndim != 1 or mesh.size < 2:
            raise ValueError("mesh must hold at least two nodes")
        if states.shape != (mesh.size, states.shape[-1]) or derivs.shape != states.shape:
            raise ValueError("states/derivs must be (len(mesh), dim) arrays")
        steps = np.diff(mesh)
        if steps.min() <= 0 or not np.allclose(steps, steps[0], rtol=1e-9):
            raise ValueError("mesh must be uniform and increasing")
        self.mesh = mesh
        self.states = states
        self.derivs = derivs
        self.history = history
        self.t0 = float(mesh[0])
        self.t1 = float(mesh[-1])
        self._h = (self.t1 - self.t0) / (mesh.size - 1)
        self.richardson_error = None

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def evaluate(self, t) -> np.ndarray:
        """State at time t; history for t < t0, error past t1."""
        t = float(t)
        if t < self.t0:
            return np.atleast_1d(np.asarray(self.history(t), dtype=float))
        if t > self.t1 + 1e-9 * max(1.0, abs(self.t1)):
            raise ValueError(f"query at t={t} is past the end of the trajectory ({self.t1})")
        t = min(t, self.t1)
        pos = (t - self.t0) / self._h
        nearest = round(pos)
        if abs(pos - nearest) < 1e-9:  # mesh nodes reproduce stored states exactly
            return self.states[int(nearest)].copy()
        i = min(int(pos), self.mesh.size - 2)
        th = (t - self.mesh[i]) / self._h
        return _hermite(self.states[i], self.derivs[i], self.states[i + 1],
                        self.derivs[i + 1], self._h, th)

    __call__ = evaluate

    def evaluate_many(self, ts) -> np.ndarray:
        """States at several times, stacked into a (len(ts), dim) array."""
        return np.stack([self.evaluate(t) for t in np.asarray(ts, dtype=float)])


def _hermite(y0, f0, y1, f1, h, th):
    """Cubic Hermite basis on one step; exact at th = 0 and 1."""
    omt = 1.0 - th
    h00 = (1.0 + 2.0 * th) * omt * omt
    h10 = th * omt * omt
    h01 = th * th * (3.0 - 2.0 * th)
    h11 = th * th * (th - 1.0)
    return h00 * y0 + (h10 * h) * f0 + h01 * y1 + (h11 * h) * f1


def integrate(rhs, history, delays: DelaySet, span, control: StepControl,
              y0=None) -> DenseTrajectory:
    """Solve y'(t) = rhs(t, y(t), (y(t - d) for d in delays)) over span.

    Args:
        rhs: callback taking (t, y, lagged) with `lagged` a tuple of state
            vectors, one per delay, in the order of `delays.delays`.
        history: callable giving the state vector for times before span[0].
        delays: the constant lags.
        span: (t0, t1) with t1 > t0.
        control: mesh resolution and optional half-step verification.
        y0: state at span[0]; defaults to history(span[0]).  An initial
            value different from the history limit is a plain jump start.

    Returns:
        The dense trajectory.  When `control.check` is set the measured
        half-step deviation is stored on the trajectory and must be below
        `control.rtol`.
    """
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise IntegrationError(f"inverted span ({t0}, {t1})")
    if control.max_step > delays.min_delay:
        raise IntegrationError(
            f"step {control.max_step} exceeds the smallest delay {delays.min_delay}; "
            "delayed lookups would read ahead of the solver front")
    if y0 is None:
        y0 = history(t0)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))

    n_steps = int(np.ceil((t1 - t0) / control.max_step))
    traj = _solve(rhs, history, delays, t0, t1, n_steps, y0)
    if control.check:
        ref = _solve(rhs, history, delays, t0, t1, 2 * n_steps, y0)
        scale = max(np.abs(ref.states).max(), 1e-300)
        err = float(np.abs(traj.states - ref.states[::2]).max() / scale)
        traj.richardson_error = err
        if err >= control.rtol:
            raise IntegrationError(
                f"half-step re-solve deviates by {err:.3e} (tolerance {control.rtol:.1e})")
    return traj


def _solve(rhs, history, delays, t0, t1, n_steps, y0):
    h = (t1 - t0) / n_steps
    lags = delays.delays
    dim = y0.size

    mesh = t0 + h * np.arange(n_steps + 1)
    mesh[-1] = t1
    states = np.empty((n_steps + 1, dim))
    derivs = np.empty((n_steps + 1, dim))
    states[0] = y0

    def lagged_at(tq, front):
        """Dense lookup; `front` counts the completed steps."""
        if tq < t0:
            return np.atleast_1d(np.asarray(history(tq), dtype=float))
        if tq > t0 + front * h + 1e-9 * max(1.0, abs(tq)):
            raise IntegrationError("delayed lookup ahead of the solver front")
        i = min(int((tq - t0) / h), front - 1)
        if i < 0:
            return states[0].copy()
        th = (tq - (t0 + i * h)) / h
        return _hermite(states[i], derivs[i], states[i + 1], derivs[i + 1], h, th)

    def eval_rhs(t, y, front):
        lagged = tuple(lagged_at(t - lag, front) for lag in lags)
        return np.asarray(rhs(t, y, lagged), dtype=float)

    derivs[0] = eval_rhs(t0, y0, 0)
    for n in range(n_steps):
        tn = t0 + n * h
        yn = states[n]
        k1 = derivs[n]
        tm = tn + 0.5 * h
        k2 = eval_rhs(tm, yn + (0.5 * h) * k1, n)
        k3 = eval_rhs(tm, yn + (0.5 * h) * k2, n)
        te = tn + h
        k4 = eval_rhs(te, yn + h * k3, n)
        y_next = yn + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(y_next).all():
            raise IntegrationError(f"nonfinite state after step to t={te}")
        states[n + 1] = y_next
        derivs[n + 1] = eval_rhs(te, y_next, n + 1)

    return DenseTrajectory(mesh, states, derivs, history)
