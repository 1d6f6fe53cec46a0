"""Discrimination and goodness-of-fit metrics for survival predictions."""

from __future__ import annotations

import numpy as np

from . import flow
from .dynamics import FlowModel
from .odeint import SolverConfig


def harrell_concordance(time, event, risk) -> float:
    """Harrell's C for right-censored data.

    A pair ``(i, j)`` is comparable when ``y_i < y_j`` and ``delta_i = 1``;
    it is concordant when ``risk_i > risk_j``.  Tied risks count 1/2.  Pairs
    with tied times where both are events are also comparable: they score 1
    when the risks are tied and 1/2 otherwise.  Returns 0.5 when no pair is
    comparable.

    Parameters
    ----------
    time : array_like, shape (n,)
        Observed times ``y``.
    event : array_like, shape (n,)
        Event indicators (1 = event, 0 = censored).
    risk : array_like, shape (n,)
        Higher means earlier expected event.

    Returns
    -------
    float
    """
    y = np.asarray(time, dtype=float)
    d = np.asarray(event).astype(bool)
    r = np.asarray(risk, dtype=float)
    if not (y.shape == d.shape == r.shape) or y.ndim != 1:
        raise ValueError("time, event and risk must be 1-d arrays of equal length")
    if np.any(~np.isfinite(r)):
        raise ValueError("risk scores must be finite")
    num = 0.0
    den = 0.0
    # one vectorized pass per event: O(n^2) overall, fine for a few thousand records
    for i in np.flatnonzero(d):
        later = y > y[i]
        n_later = int(np.count_nonzero(later))
        if n_later:
            rl = r[later]
            num += np.count_nonzero(r[i] > rl) + 0.5 * np.count_nonzero(r[i] == rl)
            den += n_later
        tied = (y == y[i]) & d
        tied[: i + 1] = False
        n_tied = int(np.count_nonzero(tied))
        if n_tied:
            rt = r[tied]
            num += np.count_nonzero(rt == r[i]) + 0.5 * np.count_nonzero(rt != r[i])
            den += n_tied
    return 0.5 if den == 0 else float(num / den)


def risk_from_samples(samples: np.ndarray, method: str = "pairwise") -> np.ndarray:
    """Risk scores from an ``(n, m)`` array of sampled event times.

    ``pairwise`` scores record ``i`` by the fraction of pooled draws of the
    other records that its own draws precede (ties count 1/2), i.e. an
    estimate of ``P(T_i < T_j)`` averaged over ``j``.  ``mean_time`` uses the
    negative mean log time.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2:
        raise ValueError("samples must have shape (n, m)")
    if method == "mean_time":
        return -np.mean(np.log(s), axis=1)
    if method != "pairwise":
        raise ValueError(f"unknown risk method {method!r}")
    n, m = s.shape
    pool = np.sort(s.ravel())
    lo = np.searchsorted(pool, s, side="left")
    hi = np.searchsorted(pool, s, side="right")
    later = pool.size - hi + 0.5 * (hi - lo)
    # remove each record's comparisons against its own draws
    own = np.sort(s, axis=1)
    own_lo = np.stack([np.searchsorted(own[i], s[i], side="left") for i in range(n)])
    own_hi = np.stack([np.searchsorted(own[i], s[i], side="right") for i in range(n)])
    later -= m - own_hi + 0.5 * (own_hi - own_lo)
    others = max(1, (n - 1) * m)
    return later.mean(axis=1) / others


def sampled_risk_scores(model: FlowModel, X, m: int = 64, rng: np.random.Generator | None = None,
                        method: str = "pairwise", solver: SolverConfig | None = None) -> np.ndarray:
    """Risk scores derived from ``m`` conditional samples per record."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return risk_from_samples(flow.sample_batch(model, X, m, rng, solver), method)


def flow_concordance(model: FlowModel, data, m: int = 64, seed: int = 0,
                     method: str = "pairwise", solver: SolverConfig | None = None) -> float:
    risk = sampled_risk_scores(model, data.X, m, np.random.default_rng(seed), method, solver)
    return harrell_concordance(data.time, data.event, risk)


def ks_distance(samples_or_cdf, reference_cdf, grid=None) -> float:
    """Kolmogorov-Smirnov distance.

    With a 1-d sample array, the empirical CDF is compared against
    ``reference_cdf`` at the sample points (both one-sided limits).  With a
    callable first argument, the two CDFs are compared on ``grid``.
    """
    if callable(samples_or_cdf):
        if grid is None:
            raise ValueError("grid is required when comparing two CDFs")
        g = np.asarray(grid, dtype=float)
        return float(np.max(np.abs(np.asarray(samples_or_cdf(g)) - np.asarray(reference_cdf(g)))))
    x = np.sort(np.asarray(samples_or_cdf, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    f = np.asarray(reference_cdf(x), dtype=float)
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def kaplan_meier(time, event, grid) -> np.ndarray:
    """Kaplan-Meier survival estimate evaluated at each point of ``grid``."""
    y = np.asarray(time, dtype=float)
    d = np.asarray(event).astype(bool)
    ts = np.unique(y[d])
    at_risk = y.size - np.searchsorted(np.sort(y), ts, side="left")
    deaths = np.array([np.count_nonzero(d & (y == t)) for t in ts])
    surv = np.cumprod(1.0 - deaths / at_risk)
    idx = np.searchsorted(ts, np.asarray(grid, dtype=float), side="right")
    return np.where(idx == 0, 1.0, surv[np.maximum(idx - 1, 0)] if surv.size else 1.0)


def calibration_grid(model: FlowModel, data, n_points: int = 10,
                     solver: SolverConfig | None = None) -> list[dict]:
    """Mean predicted survival against Kaplan-Meier at quantiles of observed time."""
    levels = np.linspace(0.1, 0.9, n_points)
    grid = np.quantile(data.time, levels)
    km = kaplan_meier(data.time, data.event, grid)
    rows = []
    for t, k in zip(grid, km):
        s = flow.survival(model, np.full(len(data), t), data.X, solver)
        rows.append({"t": float(t), "predicted": float(np.mean(s)), "kaplan_meier": float(k)})
    return rows
