"""Survival quantities of a conditional flow.

Event times relate to the standard normal latent ``Z`` through

    u = G(Z, x)                              (ODE from flow time 0 to 1)
    T = exp(time_shift + time_scale * u)

so that ``S_T(t | x) = 1 - Phi(G^{-1}(u(t), x))``.  The inverse map is the same
ODE integrated from flow time 1 back to 0; integrating the divergence along
that path gives the log-Jacobian of ``G``.

All functions broadcast: ``t`` may be a scalar or a 1-d array and ``x`` a
single covariate vector or one row per entry of ``t``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .dynamics import BatchField, FlowModel, segments
from .odeint import SolverConfig, integrate

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


class DegenerateSurvival(ArithmeticError):
    pass


# -- standard normal latent --------------------------------------------------

def latent_log_pdf(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * z * z - LOG_SQRT_2PI


def latent_survival(z):
    return special.ndtr(-np.asarray(z, dtype=float))


def latent_log_survival(z):
    return special.log_ndtr(-np.asarray(z, dtype=float))


def latent_quantile(u):
    return special.ndtri(np.asarray(u, dtype=float))


# -- integration -------------------------------------------------------------

def _broadcast(model: FlowModel, values, x):
    v = np.atleast_1d(np.asarray(values, dtype=float))
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = np.broadcast_to(X, (v.shape[0], X.shape[0]))
    elif X.shape[0] == 1 and v.shape[0] > 1:
        X = np.broadcast_to(X, (v.shape[0], X.shape[1]))
    elif v.shape[0] == 1 and X.shape[0] > 1:
        v = np.broadcast_to(v, (X.shape[0],))
    if X.shape[0] != v.shape[0]:
        raise ValueError(f"{v.shape[0]} values but {X.shape[0]} covariate rows")
    return v, model.standardize(X)


def _n_steps(solver: SolverConfig, length: float) -> int:
    return max(1, math.ceil(solver.fixed_steps * length - 1e-9))


def solve(model: FlowModel, z_start, Xs, backward: bool, solver: SolverConfig | None = None,
          unconditional: bool = False, density: bool = True):
    """Integrate the augmented state ``[z, a]`` across all drift segments.

    Going backward (flow time 1 -> 0, or ``t_x -> 0`` for the unconditional
    sub-flow) ``a`` ends at ``-int div dt``, the log-derivative of the
    inverse map.  Returns ``(z_end, a_end)``; with ``density=False`` only
    ``z`` is integrated and ``a_end`` is None.
    """
    solver = solver or model.eval_solver
    fld = BatchField(model, Xs)
    z0 = np.asarray(z_start, dtype=float)
    y = np.stack([z0, np.zeros(len(z0))]) if density else z0.copy()
    segs = segments(model.cfg, unconditional=unconditional)
    if backward:
        segs = [(t1, t0, terms) for t0, t1, terms in reversed(segs)]
    for ta, tb, terms in segs:
        if ta == tb:
            continue
        cfg = solver
        if not solver.adaptive:
            cfg = SolverConfig(method=solver.method, fixed_steps=_n_steps(solver, abs(tb - ta)),
                               max_steps=solver.max_steps)
        y = integrate(fld.ode(terms, density), y, ta, tb, cfg)
    return (y[0], y[1]) if density else (y, None)


def _to_flow_space(model: FlowModel, t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("event times must be positive")
    log_t = np.log(t)
    return (log_t - model.time_shift) / model.time_scale, log_t


# -- public operations -------------------------------------------------------

def push_forward(model: FlowModel, z, x, solver: SolverConfig | None = None):
    """Event time ``exp(G(z, x))`` for latent value(s) ``z``."""
    zs, Xs = _broadcast(model, z, x)
    u, _ = solve(model, zs, Xs, backward=False, solver=solver, density=False)
    t = np.exp(model.time_shift + model.time_scale * u)
    return t if np.ndim(z) else float(t[0])


def pull_back(model: FlowModel, t, x, solver: SolverConfig | None = None):
    """Latent value ``G^{-1}(log t, x)``; strictly increasing in ``t``."""
    ts, Xs = _broadcast(model, t, x)
    u, _ = _to_flow_space(model, ts)
    z0, _ = solve(model, u, Xs, backward=True, solver=solver, density=False)
    return z0 if np.ndim(t) else float(z0[0])


def _evaluate(model, t, x, solver):
    ts, Xs = _broadcast(model, t, x)
    u, log_t = _to_flow_space(model, ts)
    z0, a0 = solve(model, u, Xs, backward=True, solver=solver)
    log_f = latent_log_pdf(z0) + a0 - math.log(model.time_scale) - log_t
    return z0, log_f


def log_density(model: FlowModel, t, x, solver: SolverConfig | None = None):
    """``log f_T(t | x)``."""
    _, log_f = _evaluate(model, t, x, solver)
    return log_f if np.ndim(t) else float(log_f[0])


def survival(model: FlowModel, t, x, solver: SolverConfig | None = None):
    """``S_T(t | x) = 1 - Phi(G^{-1}(log t, x))``."""
    z0 = pull_back(model, t, x, solver)
    return latent_survival(z0) if np.ndim(t) else float(latent_survival(z0))


def curves(model: FlowModel, t, x, solver: SolverConfig | None = None):
    """Density, survival and hazard from a single backward solve.

    Returns ``(f, S, h)`` arrays.  ``h`` is ``nan`` where ``S < 1e-12``.
    """
    z0, log_f = _evaluate(model, np.atleast_1d(t), x, solver)
    log_s = latent_log_survival(z0)
    f = np.exp(log_f)
    s = np.exp(log_s)
    with np.errstate(over="ignore"):
        h = np.where(s >= 1e-12, np.exp(log_f - log_s), np.nan)
    return f, s, h


def hazard(model: FlowModel, t, x, solver: SolverConfig | None = None):
    """Instantaneous hazard ``f / S``."""
    z0, log_f = _evaluate(model, np.atleast_1d(t), x, solver)
    log_s = latent_log_survival(z0)
    if np.any(log_s < math.log(1e-12)):
        raise DegenerateSurvival("survival below 1e-12; hazard is not reliable")
    h = np.exp(log_f - log_s)
    return h if np.ndim(t) else float(h[0])


def quantile(model: FlowModel, x, u, solver: SolverConfig | None = None):
    """Event time with ``P(T <= t | x) = u``."""
    uu = np.asarray(u, dtype=float)
    if np.any((uu <= 0) | (uu >= 1)):
        raise DomainError("quantile level must lie in (0, 1)")
    out = push_forward(model, latent_quantile(np.atleast_1d(uu)), x, solver)
    return out if np.ndim(u) else float(out[0])


def sample(model: FlowModel, x, m: int, rng: np.random.Generator,
           solver: SolverConfig | None = None) -> np.ndarray:
    """``m`` i.i.d. event times for one covariate vector."""
    if m < 1:
        raise ValueError("m must be >= 1")
    z = rng.standard_normal(m)
    return push_forward(model, z, x, solver)


def sample_batch(model: FlowModel, X, m: int, rng: np.random.Generator,
                 solver: SolverConfig | None = None, chunk: int = 20000) -> np.ndarray:
    """``m`` draws for each row of ``X``; returns shape ``(n, m)``.

    Latent draws come from ``rng`` as one ``(n, m)`` block, so the draws do
    not depend on ``chunk`` (adaptive step sizes are shared within a chunk).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    z = rng.standard_normal((n, m)).ravel()
    rows = np.repeat(np.arange(n), m)
    out = np.empty(n * m)
    for s in range(0, n * m, chunk):
        sl = slice(s, s + chunk)
        out[sl] = push_forward(model, z[sl], X[rows[sl]], solver)
    return out.reshape(n, m)
