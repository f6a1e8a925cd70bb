"""Compiled fixed-step solver specialised to the clonal-expansion model.

Mirrors the generic method-of-steps integrator in `dde` (same scheme, same
uniform mesh, same Hermite dense output) but with the model right-hand side
inlined, so parameter fits that run thousands of simulations stay cheap.
History is identically zero, which is all the model scenarios ever use.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _naive_rate(t, dose, mu, p):
    z = (t - mu) / p
    return dose * math.exp(-0.5 * z * z) / (p * math.sqrt(2.0 * math.pi))


@njit(cache=True)
def _antigen_rate(t, dose, delta, gamma):
    x = t - delta
    if x <= 0.0:
        return 0.0
    return dose * math.sqrt(gamma / (2.0 * math.pi)) * math.exp(-gamma / (2.0 * x) - 1.5 * math.log(x))


@njit(cache=True)
def _lagged(tq, t0, h, ys, fs, front, out):
    """Cubic Hermite lookup over the filled mesh prefix; zero before t0."""
    dim = ys.shape[1]
    if tq < t0:
        for j in range(dim):
            out[j] = 0.0
        return
    i = int((tq - t0) / h)
    if i > front - 1:
        i = front - 1
    if i < 0:
        for j in range(dim):
            out[j] = ys[0, j]
        return
    th = (tq - (t0 + i * h)) / h
    omt = 1.0 - th
    h00 = (1.0 + 2.0 * th) * omt * omt
    h10 = th * omt * omt
    h01 = th * th * (3.0 - 2.0 * th)
    h11 = th * th * (th - 1.0)
    for j in range(dim):
        out[j] = (h00 * ys[i, j] + (h10 * h) * fs[i, j]
                  + h01 * ys[i + 1, j] + (h11 * h) * fs[i + 1, j])


@njit(cache=True)
def _rhs(t, y, ysig, ytau, out, rates, r_N, d, s, s_N, d_A, surv,
         n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C):
    A = y[0]
    A_s = ysig[0]
    A_t = ytau[0]
    blk = 2 * K + 1
    graze = 0.0
    for c in range(C):
        o = 1 + c * blk
        graze += s_N * y[o]
        for i in range(K):
            graze += s * y[o + 1 + i]
    out[0] = _antigen_rate(t, a_dose, a_delta, a_gamma) - (graze + d_A) * A
    for c in range(C):
        o = 1 + c * blk
        f_N = _naive_rate(t, n_dose[c], n_mu[c], n_p[c]) if n_on[c] else 0.0
        commit = r_N * y[o] * A
        commit_lag = r_N * ysig[o] * A_s
        out[o] = f_N - commit
        out[o + 1] = 2.0 * commit_lag - rates[0] * y[o + 1] * A - d * y[o + 1]
        for i in range(1, K - 1):
            out[o + 1 + i] = (2.0 * surv * rates[i - 1] * ytau[o + i] * A_t
                              - rates[i] * y[o + 1 + i] * A - d * y[o + 1 + i])
        out[o + K] = 2.0 * surv * rates[K - 2] * ytau[o + K - 1] * A_t - d * y[o + K]
        out[o + K + 1] = commit - commit_lag
        for i in range(K - 1):
            out[o + K + 2 + i] = (rates[i] * y[o + 1 + i] * A
                                  - surv * rates[i] * ytau[o + 1 + i] * A_t
                                  - d * y[o + K + 2 + i])


@njit(cache=True)
def _march(y0, t0, h, n_steps, sigma, tau, rates, r_N, d, s, s_N, d_A,
           n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C):
    dim = y0.size
    surv = math.exp(-d * tau)
    ys = np.empty((n_steps + 1, dim))
    fs = np.empty((n_steps + 1, dim))
    ys[0] = y0
    ysig = np.empty(dim)
    ytau = np.empty(dim)
    k = np.empty(dim)
    stage = np.empty(dim)
    ok = True

    _lagged(t0 - sigma, t0, h, ys, fs, 0, ysig)
    _lagged(t0 - tau, t0, h, ys, fs, 0, ytau)
    _rhs(t0, y0, ysig, ytau, k, rates, r_N, d, s, s_N, d_A, surv,
         n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C)
    fs[0] = k

    for n in range(n_steps):
        tn = t0 + n * h
        tm = tn + 0.5 * h
        te = tn + h
        acc = np.empty(dim)
        for j in range(dim):
            acc[j] = ys[n, j] + (h / 6.0) * fs[n, j]
            stage[j] = ys[n, j] + 0.5 * h * fs[n, j]
        _lagged(tm - sigma, t0, h, ys, fs, n, ysig)
        _lagged(tm - tau, t0, h, ys, fs, n, ytau)
        _rhs(tm, stage, ysig, ytau, k, rates, r_N, d, s, s_N, d_A, surv,
             n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C)
        for j in range(dim):
            acc[j] += (h / 3.0) * k[j]
            stage[j] = ys[n, j] + 0.5 * h * k[j]
        _rhs(tm, stage, ysig, ytau, k, rates, r_N, d, s, s_N, d_A, surv,
             n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C)
        for j in range(dim):
            acc[j] += (h / 3.0) * k[j]
            stage[j] = ys[n, j] + h * k[j]
        _lagged(te - sigma, t0, h, ys, fs, n, ysig)
        _lagged(te - tau, t0, h, ys, fs, n, ytau)
        _rhs(te, stage, ysig, ytau, k, rates, r_N, d, s, s_N, d_A, surv,
             n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C)
        for j in range(dim):
            acc[j] += (h / 6.0) * k[j]
            if not math.isfinite(acc[j]):
                ok = False
            ys[n + 1, j] = acc[j]
        if not ok:
            return ys, fs, n + 1
        _lagged(te - sigma, t0, h, ys, fs, n + 1, ysig)
        _lagged(te - tau, t0, h, ys, fs, n + 1, ytau)
        _rhs(te, ys[n + 1], ysig, ytau, k, rates, r_N, d, s, s_N, d_A, surv,
             n_dose, n_mu, n_p, n_on, a_dose, a_delta, a_gamma, K, C)
        fs[n + 1] = k

    return ys, fs, -1


def march_model(y0, t0, t1, n_steps, params, supplies, n_cohorts):
    """Run the compiled solver; returns (mesh, states, derivs).

    Raises the same failure mode as the generic path on nonfinite states.
    """
    from .dde import IntegrationError

    h = (t1 - t0) / n_steps
    rates = params.proliferation_schedule()
    n_dose = np.zeros(n_cohorts)
    n_mu = np.zeros(n_cohorts)
    n_p = np.ones(n_cohorts)
    n_on = np.zeros(n_cohorts, dtype=np.bool_)
    for c, spec in enumerate(supplies.naive):
        if spec is not None and spec.enabled and spec.dose > 0:
            n_dose[c] = spec.dose
            n_mu[c] = spec.mu
            n_p[c] = spec.p
            n_on[c] = True
    ag = supplies.antigen
    ys, fs, bad = _march(np.asarray(y0, dtype=float), t0, h, n_steps,
                         params.sigma, params.tau, rates,
                         params.r_N, params.d, params.s, params.s_N, params.d_A,
                         n_dose, n_mu, n_p, n_on, ag.dose, ag.delta, ag.gamma,
                         params.K, n_cohorts)
    if bad >= 0:
        raise IntegrationError(f"nonfinite state after step to t={t0 + bad * h}")
    mesh = t0 + h * np.arange(n_steps + 1)
    mesh[-1] = t1
    return mesh, ys, fs
