"""Credit-insurance portfolio selection under expected shortfall.

Entity ``i`` can be insured on a fraction ``w_i`` for price ``p_i`` over
horizon ``d_i``.  The portfolio loss in a scenario is

    L(w) = sum_i w_i (1{T_i <= d_i} - p_i)

and the allocation minimizes the Rockafellar-Uryasev form of the expected
shortfall at level ``alpha`` subject to ``0 <= w <= 1`` and ``w . p = budget``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse, special

from . import flow
from .data import (SyntheticSpec, event_survival, generate_portfolio_covariates,
                   sample_censoring_times, sample_event_times, weibull_cdf, weibull_sample)
from .dynamics import FlowModel
from .netcore import DimensionMismatch
from .odeint import SolverConfig


class Infeasible(ValueError):
    pass


class NotConverged(RuntimeError):
    pass


class Degenerate(ValueError):
    pass


# -- instances and losses ---------------------------------------------------------

@dataclass
class PortfolioInstance:
    """Scenario matrix ``D`` (scenarios x entities), prices, budget and level."""

    scenarios: np.ndarray
    prices: np.ndarray
    budget: float
    alpha: float = 0.95
    horizons: np.ndarray | None = None

    def __post_init__(self):
        self.scenarios = np.asarray(self.scenarios)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.scenarios.ndim != 2 or self.scenarios.shape[1] != self.prices.shape[0]:
            raise DimensionMismatch("scenarios must be (n_scenarios, n_entities) matching prices")
        if self.scenarios.shape[0] < 1:
            raise ValueError("need at least one scenario")
        if not np.all((self.scenarios == 0) | (self.scenarios == 1)):
            raise ValueError("scenario entries must be binary")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if np.any((self.prices <= 0) | (self.prices >= 1)):
            raise ValueError("prices must lie in (0, 1)")
        if not -1e-12 <= self.budget <= self.prices.sum() + 1e-12:
            raise Infeasible(f"budget {self.budget} outside [0, {self.prices.sum()}]")

    @property
    def n_entities(self) -> int:
        return self.prices.shape[0]

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.shape[0]

    def losses(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return self.scenarios @ w - float(self.prices @ w)


def portfolio_loss(w, scenario, prices) -> float:
    """``sum_i w_i (D_i - p_i)`` for a single scenario row."""
    w = np.asarray(w, dtype=float)
    s = np.asarray(scenario, dtype=float)
    p = np.asarray(prices, dtype=float)
    if not (w.shape == s.shape == p.shape):
        raise DimensionMismatch(f"shapes {w.shape}, {s.shape}, {p.shape} differ")
    return float(np.dot(w, s - p))


def _tail_weights(losses: np.ndarray, alpha: float):
    """Order of ``losses`` (worst first) and the CVaR weight of each position."""
    n = losses.shape[0]
    k = (1.0 - alpha) * n
    order = np.argsort(-losses, kind="stable")
    full = min(int(math.floor(k)), n)
    wts = np.zeros(n)
    wts[:full] = 1.0
    if full < n:
        wts[full] = k - full
    return order, wts / k


def expected_shortfall(losses, alpha: float) -> float:
    """Empirical CVaR: ``min_b b + sum_j [L_j - b]^+ / ((1 - alpha) N)``.

    The mean of the worst ``(1 - alpha) N`` losses, where a fractional
    count takes the matching fraction of the next-worst loss.
    """
    L = np.asarray(losses, dtype=float).ravel()
    if L.size == 0:
        raise ValueError("no losses")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    order, wts = _tail_weights(L, alpha)
    return float(np.dot(wts, L[order]))


def value_at_risk(losses, alpha: float) -> float:
    """A minimizing ``b`` of the Rockafellar-Uryasev function."""
    L = np.sort(np.asarray(losses, dtype=float))[::-1]
    k = (1.0 - alpha) * L.size
    return float(L[min(int(math.ceil(k)) - 1, L.size - 1)]) if k >= 1 else float(L[0])


# -- optimization -----------------------------------------------------------------

@dataclass
class CvarSolution:
    weights: np.ndarray
    beta: float
    objective: float
    method: str
    iterations: int = 0


def _project(v: np.ndarray, p: np.ndarray, budget: float) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= 1, w . p = budget}``.

    The projection is ``clip(v - lam p, 0, 1)`` with ``lam`` chosen so the
    budget holds; ``w(lam) . p`` is nonincreasing so bisection finds it.
    """
    def spend(lam):
        return float(p @ np.clip(v - lam * p, 0.0, 1.0))

    lo, hi = -1.0, 1.0
    while spend(lo) < budget:
        lo *= 2.0
    while spend(hi) > budget:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if spend(mid) > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(lo)):
            break
    return np.clip(v - 0.5 * (lo + hi) * p, 0.0, 1.0)


def _solve_highs(inst: PortfolioInstance):
    """Scenario LP via its dual, which has ``n + 1`` rows instead of ``N``.

    With ``S = D - p`` the expected shortfall is ``max_q q . S w`` over
    ``{0 <= q <= 1/k, sum q = 1}``, ``k = (1 - alpha) N``.  Dualizing the
    inner minimization over ``w`` gives

        max  lam * budget - sum mu
        s.t. S^T q - lam p + mu >= 0,  sum q = 1,  0 <= q <= 1/k,  mu >= 0

    and the optimal ``w`` is the multiplier of the first block of rows.
    """
    N, n = inst.scenarios.shape
    p = inst.prices
    k = (1.0 - inst.alpha) * N
    S = inst.scenarios.astype(float) - p[None, :]
    # variables: q (N), lam (1), mu (n)
    c = np.concatenate([np.zeros(N), [-inst.budget], np.ones(n)])
    A_ub = sparse.hstack([sparse.csr_matrix(-S.T), p[:, None], -sparse.identity(n)], format="csr")
    A_eq = np.concatenate([np.ones(N), [0.0], np.zeros(n)])[None, :]
    bounds = [(0.0, 1.0 / k)] * N + [(None, None)] + [(0.0, None)] * n
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=[1.0],
                           bounds=bounds, method="highs")
    if res.status == 2:
        raise Infeasible(res.message)
    if res.status != 0:
        raise NotConverged(res.message)
    return np.clip(-res.ineqlin.marginals, 0.0, 1.0), int(getattr(res, "nit", 0))


def _solve_subgradient(inst: PortfolioInstance, max_iter: int, tol: float):
    p = inst.prices
    shifted = inst.scenarios - p[None, :]
    w = _project(np.full(inst.n_entities, inst.budget / max(p.sum(), 1e-300)), p, inst.budget)
    avg = w.copy()
    best_w, best = w.copy(), expected_shortfall(shifted @ w, inst.alpha)
    window = best
    scale = math.sqrt(inst.n_entities)
    for it in range(1, max_iter + 1):
        order, wts = _tail_weights(shifted @ w, inst.alpha)
        g = wts @ shifted[order]
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            return w, it
        w = _project(w - (scale / math.sqrt(it)) * g / gn, p, inst.budget)
        avg += (w - avg) / (it + 1)
        for cand in (w, avg):
            val = expected_shortfall(shifted @ cand, inst.alpha)
            if val < best:
                best, best_w = val, cand.copy()
        if it % 500 == 0:
            if window - best <= tol * max(1.0, abs(best)):
                return best_w, it
            window = best
    raise NotConverged(f"subgradient method did not settle within {max_iter} iterations")


def optimize_cvar(inst: PortfolioInstance, method: str = "highs", max_iter: int = 20000,
                  tol: float = 1e-7) -> CvarSolution:
    """Minimize the scenario expected shortfall over feasible weights.

    Parameters
    ----------
    inst : PortfolioInstance
    method : {"highs", "subgradient"}
        ``highs`` solves the scenario linear program exactly with the HiGHS
        solver.  ``subgradient`` runs projected subgradient descent with
        iterate averaging on the piecewise-linear objective in ``w``; it is
        dependency-light but only approximately optimal.
    max_iter, tol : subgradient controls.

    Returns
    -------
    CvarSolution
        ``objective`` is the expected shortfall of the returned weights on
        the instance scenarios, and ``beta`` the matching value at risk.
    """
    if method == "highs":
        w, iters = _solve_highs(inst)
    elif method == "subgradient":
        w, iters = _solve_subgradient(inst, max_iter, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    losses = inst.losses(w)
    return CvarSolution(w, value_at_risk(losses, inst.alpha),
                        expected_shortfall(losses, inst.alpha), method, iters)


# -- default models ---------------------------------------------------------------

def _profile_score(a, logy, ev_logy_sum, D):
    """Profile log-likelihood derivatives in the shape ``a`` (times rescaled)."""
    m = logy.max()
    ya = np.exp(a * (logy - m))
    s0 = ya.sum()
    s1 = (ya * logy).sum() / s0
    s2 = (ya * logy * logy).sum() / s0
    d1 = D / a + ev_logy_sum - D * s1
    d2 = -D / (a * a) - D * (s2 - s1 * s1)
    return d1, d2


def fit_weibull(time, event) -> tuple[float, float]:
    """Censored Weibull maximum likelihood ``(shape, scale)``.

    Safeguarded Newton iteration on the profile likelihood in the shape,
    with the scale eliminated through ``scale^shape = sum y^shape / #events``.
    """
    y = np.asarray(time, dtype=float)
    d = np.asarray(event).astype(bool)
    if y.size == 0 or not d.any():
        raise Degenerate("Weibull fit needs at least one event")
    if np.any(y <= 0):
        raise ValueError("times must be positive")
    c = math.exp(np.mean(np.log(y)))
    logy = np.log(y / c)
    D = float(d.sum())
    ev = float(logy[d].sum())
    if np.ptp(logy) == 0.0:
        raise Degenerate("all observed times are equal; shape is unbounded")
    # the profile likelihood is concave in a: bracket the root of its derivative
    lo, hi = 1.0, 1.0
    while _profile_score(lo, logy, ev, D)[0] < 0:
        lo *= 0.5
    while _profile_score(hi, logy, ev, D)[0] > 0:
        hi *= 2.0
        if hi > 1e8:
            raise Degenerate("shape estimate diverges")
    a = 0.5 * (lo + hi)
    for _ in range(200):
        g, h = _profile_score(a, logy, ev, D)
        if g > 0:
            lo = a
        else:
            hi = a
        step = -g / h if h < 0 else 0.0
        nxt = a + step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - a) <= 1e-15 * a:
            a = nxt
            break
        a = nxt
    m = logy.max()
    log_ba = m * a + math.log(np.exp(a * (logy - m)).sum() / D)
    return float(a), float(c * math.exp(log_ba / a))


def weibull_loglik(time, event, shape, scale) -> float:
    y = np.asarray(time, dtype=float)
    d = np.asarray(event).astype(bool)
    z = (y / scale) ** shape
    log_f = math.log(shape / scale) + (shape - 1) * np.log(y / scale) - z
    return float(np.sum(np.where(d, log_f, -z)))


@dataclass
class WeibullBaseline:
    """Independent Weibull law per risk class."""

    shapes: np.ndarray
    scales: np.ndarray

    @classmethod
    def fit(cls, time, event, labels, n_classes: int | None = None) -> "WeibullBaseline":
        labels = np.asarray(labels, dtype=int)
        k = int(labels.max()) + 1 if n_classes is None else n_classes
        pars = []
        for c in range(k):
            mask = labels == c
            try:
                pars.append(fit_weibull(np.asarray(time)[mask], np.asarray(event)[mask]))
            except Degenerate as exc:
                raise Degenerate(f"class {c}: {exc}") from exc
        a, b = np.array(pars).T
        return cls(a, b)

    def default_probabilities(self, labels, horizons) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        return weibull_cdf(horizons, self.shapes[labels], self.scales[labels])

    def sample_times(self, labels, m: int, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        return weibull_sample(self.shapes[labels], self.scales[labels], rng,
                              size=(m, labels.shape[0]))


@dataclass
class FlowDefaults:
    """Default model backed by a trained flow.

    A default by ``d`` happens iff the latent draw lies below
    ``G^{-1}(log d, x)`` (the flow is increasing in the latent), so one
    backward solve per entity replaces per-scenario sampling.
    """

    model: FlowModel
    solver: SolverConfig | None = None

    def default_probabilities(self, X, horizons) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = np.broadcast_to(np.asarray(horizons, dtype=float), (X.shape[0],))
        z = flow.pull_back(self.model, d, X, self.solver)
        return special.ndtr(z)

    def sample_times(self, X, m: int, rng: np.random.Generator) -> np.ndarray:
        return flow.sample_batch(self.model, X, m, rng, self.solver).T


@dataclass
class TrueDefaults:
    """The data-generating law of the synthetic universe."""

    spec: SyntheticSpec

    def default_probabilities(self, X, horizons) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = np.broadcast_to(np.asarray(horizons, dtype=float), (X.shape[0],))
        return 1.0 - event_survival(self.spec, d, X)

    def sample_times(self, X, m: int, rng: np.random.Generator) -> np.ndarray:
        return sample_event_times(self.spec, np.atleast_2d(X), rng, m=m)


def simulate_default_scenarios(model, covariates, horizons, n_scenarios: int,
                               rng: np.random.Generator, exact_sampling: bool = False) -> np.ndarray:
    """Binary matrix ``(n_scenarios, n_entities)`` of defaults ``T_ij <= d_i``.

    By default each entry is drawn as ``U_ij <= P(T_i <= d_i)``, which has the
    same law as thresholding sampled times and needs one probability per
    entity.  ``exact_sampling=True`` draws the event times themselves.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    n = np.asarray(covariates).shape[0]
    d = np.broadcast_to(np.asarray(horizons, dtype=float), (n,))
    if exact_sampling:
        return (model.sample_times(covariates, n_scenarios, rng) <= d[None, :]).astype(np.uint8)
    pd = np.asarray(model.default_probabilities(covariates, d), dtype=float)
    return (rng.random((n_scenarios, n)) <= pd[None, :]).astype(np.uint8)


def fair_prices(model, covariates, horizons, n_scenarios: int = 100_000,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Monte Carlo ``E[1{T_i <= d_i}]`` clamped to ``[1e-6, 1 - 1e-6]``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    D = simulate_default_scenarios(model, covariates, horizons, n_scenarios, rng)
    return np.clip(D.mean(axis=0), 1e-6, 1.0 - 1e-6)


# -- experiment -------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    n_classes: int = 10
    entities_per_class: int = 20
    history_per_class: int = 300
    noise: float = 0.1
    alpha: float = 0.95
    # horizon: this quantile of the universe's marginal event-time law
    horizon_quantile: float = 0.25
    budget_fraction: float = 0.5
    n_price_scenarios: int = 100_000
    n_opt_scenarios: int = 10_000
    n_eval_scenarios: int = 100_000
    method: str = "highs"

    def __post_init__(self):
        if not 0 < self.alpha < 1 or not 0 < self.horizon_quantile < 1:
            raise ValueError("alpha and horizon_quantile must lie in (0, 1)")
        if not 0 <= self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in [0, 1]")


@dataclass
class Universe:
    """Risk classes of the synthetic credit universe and their history."""

    spec: SyntheticSpec
    centers: np.ndarray
    history_X: np.ndarray
    history_labels: np.ndarray
    history_time: np.ndarray
    history_event: np.ndarray
    horizon: float


def make_universe(spec: SyntheticSpec, cfg: ExperimentConfig, rng: np.random.Generator) -> Universe:
    """Class centers, an observed (censored) history, and the common horizon."""
    X, labels, centers = generate_portfolio_covariates(
        cfg.n_classes, cfg.n_classes * cfg.history_per_class, rng, d=spec.d, noise=cfg.noise)
    T = sample_event_times(spec, X, rng)
    C = sample_censoring_times(spec, X, rng)
    pool = sample_event_times(spec, X, rng, m=20).ravel()
    horizon = float(np.quantile(pool, cfg.horizon_quantile))
    return Universe(spec, centers, X, labels, np.minimum(T, C), (T <= C).astype(np.int64), horizon)


def run_experiment(candidates: dict, truth, universe: Universe, cfg: ExperimentConfig,
                   rng: np.random.Generator, pricing: str = "weibull") -> dict:
    """Optimize once per candidate model and score each allocation under ``truth``.

    ``candidates`` maps a name to ``(model, inputs)`` where ``inputs`` selects
    what the model is conditioned on: ``"X"`` for covariates or ``"labels"``
    for class indices.  Prices come from the candidate named by ``pricing``.
    Every candidate is optimized on its own scenarios with the same prices
    and budget; realized losses use fresh scenarios from ``truth``.
    """
    X, labels, _ = generate_portfolio_covariates(
        cfg.n_classes, cfg.n_classes * cfg.entities_per_class, rng, centers=universe.centers,
        noise=cfg.noise)
    d = np.full(X.shape[0], universe.horizon)

    def inputs(kind):
        return X if kind == "X" else labels

    model, kind = candidates[pricing]
    prices = fair_prices(model, inputs(kind), d, cfg.n_price_scenarios, rng)
    budget = cfg.budget_fraction * float(prices.sum())
    D_true = simulate_default_scenarios(truth, X, d, cfg.n_eval_scenarios, rng)
    report = {"horizon": universe.horizon, "alpha": cfg.alpha, "budget": budget,
              "n_entities": int(X.shape[0]), "prices": prices.tolist(), "models": {}}
    realized = {}
    for name, (model, kind) in candidates.items():
        D = simulate_default_scenarios(model, inputs(kind), d, cfg.n_opt_scenarios, rng)
        sol = optimize_cvar(PortfolioInstance(D, prices, budget, cfg.alpha), method=cfg.method)
        losses = D_true @ sol.weights - float(prices @ sol.weights)
        realized[name] = losses
        report["models"][name] = {
            "weights": sol.weights.tolist(),
            "in_sample_es": sol.objective,
            "realized_es": expected_shortfall(losses, cfg.alpha),
            "realized_mean_loss": float(losses.mean()),
        }
    report["realized_losses"] = realized
    return report


def write_losses_csv(losses: dict, path) -> None:
    """Realized losses, one column per model."""
    names = list(losses)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(losses[n] for n in names)):
            w.writerow([repr(float(v)) for v in row])


def write_report(report: dict, json_path, csv_path=None) -> None:
    """JSON summary plus an optional CSV of realized losses."""
    body = {k: v for k, v in report.items() if k != "realized_losses"}
    with open(json_path, "w") as fh:
        json.dump(body, fh, indent=2)
    if csv_path is not None:
        write_losses_csv(report["realized_losses"], csv_path)
