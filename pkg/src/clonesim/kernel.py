"""Core model: parameters, supply schedules, and the delayed right-hand side.

The model tracks a shared antigen level A plus, for each injected cohort of
T cells, a naive compartment N, activated compartments T_1..T_K indexed by
completed divisions, and transit compartments (D_N, D_1..D_{K-1}) holding
cells that have committed to a division but not yet finished it.  Time is in
hours, cell densities in cells per 1e5 leukocytes, antigen in units of the
injected dose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SQRT_TWO_PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelParams:
    """Rate constants, delays and schedule parameters of the model.

    Defaults are the calibrated estimates used throughout; `K` is the
    division-tracking depth at which the compartment chain is truncated.
    """

    r_e: float = 1.5412    # max proliferation coefficient (1/h)
    r_N: float = 0.0497    # naive activation coefficient (1/h)
    g: float = 0.0994      # per-division proliferation decrement
    M: int = 10            # division count at which the rate plateaus
    d: float = 0.0009      # activated T cell clearance rate (1/h)
    s: float = 0.0009      # antigen downregulation by activated cells (1/h per cell)
    s_N: float = 0.0       # antigen downregulation by naive cells (1/h per cell)
    sigma: float = 24.0    # first-division delay (h)
    tau: float = 3.9796    # subsequent-division delay (h)
    d_A: float = 0.01      # antigen decay rate (1/h)
    K: int = 20            # compartment truncation depth

    def __post_init__(self):
        for name in ("r_e", "r_N", "g", "d", "s", "s_N", "d_A"):
            if getattr(self, name) < 0:
                raise ValueError(f"invalid params: {name} must be nonnegative")
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("invalid params: delays sigma and tau must be positive")
        if not isinstance(self.M, int) or self.M < 1:
            raise ValueError("invalid params: M must be a positive integer")
        if not isinstance(self.K, int) or self.K < self.M:
            raise ValueError("invalid params: K must be an integer >= M")
        if self.g * self.M >= 1.0:
            raise ValueError("invalid params: g*M must be < 1 so the division rate stays positive")

    def with_values(self, **kwargs) -> "ModelParams":
        """Copy with selected fields replaced."""
        return replace(self, **kwargs)

    def proliferation_schedule(self) -> np.ndarray:
        """Division rates for divisions out of T_1..T_K (length K)."""
        return np.array([proliferation_rate(i, self) for i in range(1, self.K + 1)])

    @property
    def delays(self) -> tuple[float, float]:
        return (self.sigma, self.tau)


def proliferation_rate(i, params: ModelParams) -> float:
    """Division rate of cells that have completed `i` divisions (1/h).

    Declines linearly with each completed division until division M and
    holds constant afterwards at the ramp's value there:
    r_i = r_e * (1 - g * (min(i, M) - 1)).
    """
    if i < 1:
        raise ValueError("invalid params: division index must be >= 1")
    eff = min(int(i), params.M)
    return params.r_e * (1.0 - params.g * (eff - 1))


@dataclass(frozen=True)
class NaiveSupplySpec:
    """Gaussian arrival-rate schedule for transferred naive T cells.

    The rate integrates to `dose` over all time and peaks `offset` hours
    after the injection time `t_c`.
    """

    dose: float            # cells per 1e5 leukocytes
    t_c: float = 0.0       # injection time (h)
    offset: float = 3.0    # lag from injection to peak arrival (h)
    p: float = 0.75        # spread of the arrival pulse (h)
    enabled: bool = True

    def __post_init__(self):
        if self.dose < 0:
            raise ValueError("supply dose must be nonnegative")
        if self.p <= 0:
            raise ValueError("supply spread p must be positive")

    @property
    def mu(self) -> float:
        """Time of peak arrival rate."""
        return self.t_c + self.offset


def naive_supply_rate(t, spec: NaiveSupplySpec):
    """Arrival rate of naive cells at time t (cells per 1e5 leukocytes per hour)."""
    if not spec.enabled:
        return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
    z = (np.asarray(t, dtype=float) - spec.mu) / spec.p
    out = spec.dose * np.exp(-0.5 * z * z) / (spec.p * SQRT_TWO_PI)
    return out if np.ndim(t) else float(out)


@dataclass(frozen=True)
class AntigenSupplySpec:
    """Heavy-tailed arrival-rate schedule for injected antigen.

    Antigen starts arriving `onset` hours after the injection time `t_k`
    and the rate integrates to `dose`.  Only the one-sided stable shape
    with alpha=0.5, beta=1 is supported; it has the closed form
    f(x) = sqrt(gamma/(2*pi)) * exp(-gamma/(2*x)) / x^(3/2) for x > 0,
    with x the time since onset.
    """

    dose: float = 1.0      # fraction of the injected dose
    t_k: float = 0.0       # injection time (h)
    onset: float = 12.0    # lag before antigen reaches the node (h)
    alpha: float = 0.5     # stability index
    beta: float = 1.0      # skewness
    gamma: float = 1.0     # scale (h)

    def __post_init__(self):
        if self.dose < 0:
            raise ValueError("antigen dose must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("antigen scale gamma must be positive")
        if (self.alpha, self.beta) != (0.5, 1.0):
            raise ValueError(
                "only the one-sided alpha=0.5, beta=1 stable supply is implemented")

    @property
    def delta(self) -> float:
        """Time at which antigen starts arriving."""
        return self.t_k + self.onset


def antigen_supply_rate(t, spec: AntigenSupplySpec):
    """Antigen arrival rate at time t (dose fraction per hour)."""
    x = np.asarray(t, dtype=float) - spec.delta
    pos = x > 0.0
    xp = np.where(pos, x, 1.0)
    coef = spec.dose * math.sqrt(spec.gamma / (2.0 * math.pi))
    # log form avoids 0*inf at the support edge
    out = np.where(pos, coef * np.exp(-spec.gamma / (2.0 * xp) - 1.5 * np.log(xp)), 0.0)
    return out if np.ndim(t) else float(out)


@dataclass(frozen=True)
class SupplySet:
    """Supply schedules for one scenario: shared antigen, one naive schedule per cohort.

    A cohort seeded through an initial condition instead of a transfer pulse
    carries None in `naive`.
    """

    antigen: AntigenSupplySpec
    naive: tuple

    def naive_rate(self, t, cohort):
        spec = self.naive[cohort]
        if spec is None:
            return 0.0
        return naive_supply_rate(t, spec)


class StateLayout:
    """Index map for the flat state vector.

    Layout: [A, then per cohort (N, T_1..T_K, D_N, D_1..D_{K-1})].
    """

    def __init__(self, K: int, n_cohorts: int):
        if K < 2:
            raise ValueError("need K >= 2 division compartments")
        if n_cohorts < 1:
            raise ValueError("need at least one cohort")
        self.K = K
        self.n_cohorts = n_cohorts
        self.block = 2 * K + 1
        self.size = 1 + n_cohorts * self.block

    def naive(self, c) -> int:
        return 1 + c * self.block

    def t_cells(self, c) -> slice:
        o = 1 + c * self.block
        return slice(o + 1, o + 1 + self.K)

    def transit_first(self, c) -> int:
        return 1 + c * self.block + self.K + 1

    def transit(self, c) -> slice:
        o = 1 + c * self.block
        return slice(o + self.K + 2, o + 2 * self.K + 1)

    def total(self, y, cohort=None):
        """Total cells of one cohort (or all cohorts) in a state vector."""
        cohorts = range(self.n_cohorts) if cohort is None else (cohort,)
        tot = 0.0
        for c in cohorts:
            tot += (y[..., self.naive(c)] + y[..., self.t_cells(c)].sum(axis=-1)
                    + y[..., self.transit_first(c)] + y[..., self.transit(c)].sum(axis=-1))
        return tot

    def activated(self, y, cohort):
        """Cells past activation (everything but naive) for one cohort."""
        return (y[..., self.t_cells(cohort)].sum(axis=-1)
                + y[..., self.transit_first(cohort)] + y[..., self.transit(cohort)].sum(axis=-1))


@dataclass(frozen=True)
class CohortState:
    """One cohort's compartments."""

    N: float
    T: np.ndarray      # shape (K,), completed-division index 1..K
    D_N: float
    D: np.ndarray      # shape (K-1,), transit out of T_1..T_{K-1}


@dataclass(frozen=True)
class SystemState:
    """Antigen level plus per-cohort compartments at one instant."""

    A: float
    cohorts: tuple

    @property
    def K(self) -> int:
        return len(self.cohorts[0].T)

    def to_vector(self) -> np.ndarray:
        lay = StateLayout(self.K, len(self.cohorts))
        y = np.empty(lay.size)
        y[0] = self.A
        for c, coh in enumerate(self.cohorts):
            y[lay.naive(c)] = coh.N
            y[lay.t_cells(c)] = coh.T
            y[lay.transit_first(c)] = coh.D_N
            y[lay.transit(c)] = coh.D
        return y

    @classmethod
    def from_vector(cls, y, K: int, n_cohorts: int) -> "SystemState":
        lay = StateLayout(K, n_cohorts)
        if y.shape[-1] != lay.size:
            raise ValueError("state vector length does not match layout")
        cohorts = tuple(
            CohortState(N=float(y[lay.naive(c)]), T=np.array(y[lay.t_cells(c)]),
                        D_N=float(y[lay.transit_first(c)]), D=np.array(y[lay.transit(c)]))
            for c in range(n_cohorts))
        return cls(A=float(y[0]), cohorts=cohorts)

    @classmethod
    def zero(cls, K: int, n_cohorts: int) -> "SystemState":
        return cls.from_vector(np.zeros(1 + n_cohorts * (2 * K + 1)), K, n_cohorts)


def total_t_cells(state: SystemState, cohort=None) -> float:
    """Sum of naive, activated and in-transit cells for one cohort or all.

    `cohort` is an integer index or None for the sum over cohorts.
    """
    if cohort is None:
        idx = range(len(state.cohorts))
    else:
        if not 0 <= cohort < len(state.cohorts):
            raise ValueError(f"unknown cohort {cohort!r}")
        idx = (cohort,)
    tot = 0.0
    for c in idx:
        coh = state.cohorts[c]
        tot += coh.N + coh.T.sum() + coh.D_N + coh.D.sum()
    return float(tot)


def rhs_vector(t, y, y_sigma, y_tau, supplies: SupplySet, params: ModelParams,
               layout: StateLayout, rates=None) -> np.ndarray:
    """Time derivative of the flat state vector.

    `y_sigma` and `y_tau` are the state vectors lagged by sigma and tau.
    `rates` may carry the precomputed division-rate schedule.
    """
    K = layout.K
    r = params.proliferation_schedule() if rates is None else rates
    surv = math.exp(-params.d * params.tau)
    dy = np.empty_like(y)

    A = y[0]
    A_s = y_sigma[0]
    A_t = y_tau[0]
    graze = 0.0
    for c in range(layout.n_cohorts):
        graze += params.s_N * y[layout.naive(c)] + params.s * y[layout.t_cells(c)].sum()
    dy[0] = antigen_supply_rate(t, supplies.antigen) - (graze + params.d_A) * A

    for c in range(layout.n_cohorts):
        n_i = layout.naive(c)
        t_sl = layout.t_cells(c)
        dn_i = layout.transit_first(c)
        d_sl = layout.transit(c)

        commit = params.r_N * y[n_i] * A
        commit_lag = params.r_N * y_sigma[n_i] * A_s
        dy[n_i] = supplies.naive_rate(t, c) - commit
        dy[dn_i] = commit - commit_lag

        T = y[t_sl]
        T_lag = y_tau[t_sl]
        div = r * T * A                  # commitment to the next division, per compartment
        div_lag = r * T_lag * A_t
        dT = np.empty(K)
        dT[0] = 2.0 * commit_lag - div[0] - params.d * T[0]
        dT[1:K - 1] = 2.0 * surv * div_lag[:K - 2] - div[1:K - 1] - params.d * T[1:K - 1]
        # deepest compartment only clears; there is no further division outflow
        dT[K - 1] = 2.0 * surv * div_lag[K - 2] - params.d * T[K - 1]
        dy[t_sl] = dT
        dy[d_sl] = div[:K - 1] - surv * div_lag[:K - 1] - params.d * y[d_sl]
    return dy


def rhs(t, now: SystemState, lag_sigma: SystemState, lag_tau: SystemState,
        supplies: SupplySet, params: ModelParams) -> SystemState:
    """State derivative at time t given the current and lagged states."""
    n_cohorts = len(now.cohorts)
    if len(supplies.naive) != n_cohorts:
        raise ValueError("one naive supply entry per cohort is required")
    y = now.to_vector()
    ys = lag_sigma.to_vector()
    yt = lag_tau.to_vector()
    if not (np.isfinite(y).all() and np.isfinite(ys).all() and np.isfinite(yt).all()):
        raise ValueError("nonfinite state passed to rhs")
    layout = StateLayout(params.K, n_cohorts)
    if y.size != layout.size:
        raise ValueError("state does not match params.K")
    dy = rhs_vector(t, y, ys, yt, supplies, params, layout)
    return SystemState.from_vector(dy, params.K, n_cohorts)


def make_rhs(params: ModelParams, supplies: SupplySet, n_cohorts: int):
    """Vector-level rhs callback f(t, y, (y_sigma, y_tau)) for the integrator."""
    layout = StateLayout(params.K, n_cohorts)
    rates = params.proliferation_schedule()

    def f(t, y, lagged):
        y_sigma, y_tau = lagged
        return rhs_vector(t, y, y_sigma, y_tau, supplies, params, layout, rates)

    return f
