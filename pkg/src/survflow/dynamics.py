"""Conditional vector field of the flow and its divergence.

The drift for a record with covariates ``x`` at flow time ``t`` is a gated
mixture of ``K`` scalar state networks per hierarchy level ``h``::

    drift(z, t, x) = sum_h e_h(t) sum_i q_ih(t, x) sigma_ih(t) g_ih(z)

where ``sigma_h`` is a softmax over ``K`` outputs of a small net of ``t``,
``q_ih`` is either the covariate gate ``pi_ih(x)`` (softmax of a net of
``x``) or 1, and ``e_h`` is an envelope that depends on the hierarchy mode:

``none``        one level, ``e = 1``, ``q = pi``
``shared-gate`` one level, ``q = 1`` for ``t <= t_x`` and ``pi`` afterwards
``discrete``    level ``h`` active on ``(t_{h-1}, t_h]`` only
``continuous``  every level active with ``e_h = exp(-c_h (t - t_h)^2)``

Because ``z`` is scalar the divergence is the plain derivative in ``z``,
computed exactly from forward tangents of the state networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import netcore
from .netcore import DenseNet, ParamLayout, ScalarStack
from .odeint import NonFiniteError, SolverConfig

MODES = ("none", "shared-gate", "discrete", "continuous")


@dataclass(frozen=True)
class DynamicsConfig:
    """Architecture of a flow.

    Sizes follow the usual ``S`` (width) / ``L`` (number of hidden layers)
    convention for the covariate gate (``pi``), the time gate (``sigma``)
    and the state nets (``g``).
    """

    n_features: int
    K: int = 4
    H: int = 1
    hierarchy: str = "none"
    gate_time: float = 0.5
    breakpoints: tuple[float, ...] = ()
    centers: tuple[float, ...] = ()
    init_width: float = 20.0
    pi_size: int = 4
    pi_depth: int = 2
    sigma_size: int = 4
    sigma_depth: int = 2
    g_size: int = 8
    g_depth: int = 2
    hierarchy_weight: float = 1.0

    def __post_init__(self):
        if self.hierarchy not in MODES:
            raise ValueError(f"hierarchy must be one of {MODES}, got {self.hierarchy!r}")
        if self.K < 1 or self.H < 1 or self.n_features < 0:
            raise ValueError("K >= 1, H >= 1 and n_features >= 0 required")
        if self.hierarchy in ("none", "shared-gate") and self.H != 1:
            raise ValueError(f"{self.hierarchy} mode uses exactly one level")
        if self.hierarchy == "shared-gate" and not 0.0 <= self.gate_time <= 1.0:
            raise ValueError("gate_time must lie in [0, 1]")
        if self.hierarchy == "discrete":
            bp = self.breakpoints
            if len(bp) != self.H or not all(0 < b <= 1 for b in bp) or any(
                b2 <= b1 for b1, b2 in zip(bp, bp[1:])
            ):
                raise ValueError("discrete mode needs H strictly increasing breakpoints in (0, 1]")
        if self.hierarchy == "continuous":
            if len(self.centers) != self.H or not all(0 <= c <= 1 for c in self.centers):
                raise ValueError("continuous mode needs H centers in [0, 1]")
            if self.init_width <= 0:
                raise ValueError("init_width must be positive")
        if self.hierarchy_weight < 0:
            raise ValueError("hierarchy_weight must be >= 0")
        for name in ("pi_size", "sigma_size", "g_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("pi_depth", "sigma_depth", "g_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def pi_sizes(self):
        return [self.n_features] + [self.pi_size] * self.pi_depth + [self.K]

    def sigma_sizes(self):
        return [1] + [self.sigma_size] * self.sigma_depth + [self.K]

    def g_sizes(self):
        return [1] + [self.g_size] * self.g_depth + [1]


@dataclass(frozen=True)
class Term:
    level: int
    use_pi: bool
    rbf: bool = False


def segments(cfg: DynamicsConfig, unconditional: bool = False):
    """Pieces of ``[0, 1]`` on which the drift is smooth in ``t``.

    Returns a list of ``(t_start, t_end, terms)`` in increasing time.  With
    ``unconditional=True`` only the covariate-free part ``[0, t_x]`` of a
    shared-gate flow is returned.
    """
    if unconditional:
        if cfg.hierarchy != "shared-gate":
            raise ModeError("the unconditional sub-flow exists only in shared-gate mode")
        return [(0.0, cfg.gate_time, (Term(0, False),))] if cfg.gate_time > 0 else []
    if cfg.hierarchy == "none":
        return [(0.0, 1.0, (Term(0, True),))]
    if cfg.hierarchy == "shared-gate":
        out = []
        if cfg.gate_time > 0:
            out.append((0.0, cfg.gate_time, (Term(0, False),)))
        if cfg.gate_time < 1:
            out.append((cfg.gate_time, 1.0, (Term(0, True),)))
        return out
    if cfg.hierarchy == "discrete":
        edges = (0.0,) + tuple(cfg.breakpoints)
        # beyond t_H the drift is zero: nothing to integrate
        return [(edges[h], edges[h + 1], (Term(h, True),)) for h in range(cfg.H)]
    return [(0.0, 1.0, tuple(Term(h, True, rbf=True) for h in range(cfg.H)))]


class ModeError(ValueError):
    pass


@dataclass
class FlowModel:
    """Learnable flow plus the fixed affine maps around it.

    Covariates are standardized with ``(x - x_mean) / x_scale`` before the
    covariate gate; the flow output ``u`` maps to event time through
    ``t = exp(time_shift + time_scale * u)``.  Both maps are fixed at fit
    time and are not learned.
    """

    cfg: DynamicsConfig
    pi: list[DenseNet]
    sigma: list[DenseNet]
    g: list[list[DenseNet]]
    log_width: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    time_shift: float = 0.0
    time_scale: float = 1.0
    eval_solver: SolverConfig = field(default_factory=SolverConfig)

    def layout(self) -> ParamLayout:
        segs = []
        for h in range(self.cfg.H):
            for prefix, net in ((f"pi{h}", self.pi[h]), (f"sigma{h}", self.sigma[h])):
                for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                    segs += [(f"{prefix}.W{l}", w.shape), (f"{prefix}.b{l}", b.shape)]
            for i, net in enumerate(self.g[h]):
                for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                    segs += [(f"g{h}.{i}.W{l}", w.shape), (f"g{h}.{i}.b{l}", b.shape)]
        if self.cfg.hierarchy == "continuous":
            segs.append(("log_width", (self.cfg.H,)))
        return ParamLayout(tuple(segs))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for h in range(self.cfg.H):
            for prefix, net in ((f"pi{h}", self.pi[h]), (f"sigma{h}", self.sigma[h])):
                for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                    out[f"{prefix}.W{l}"], out[f"{prefix}.b{l}"] = w, b
            for i, net in enumerate(self.g[h]):
                for l, (w, b) in enumerate(zip(net.weights, net.biases)):
                    out[f"g{h}.{i}.W{l}"], out[f"g{h}.{i}.b{l}"] = w, b
        if self.cfg.hierarchy == "continuous":
            out["log_width"] = self.log_width
        return out

    def params(self) -> np.ndarray:
        return netcore.pack(self.layout(), self.arrays())

    def with_params(self, vec) -> "FlowModel":
        a = netcore.unpack(self.layout(), vec)

        def rebuild(prefix, net):
            n = len(net.weights)
            return DenseNet(net.sizes, [a[f"{prefix}.W{l}"] for l in range(n)],
                            [a[f"{prefix}.b{l}"] for l in range(n)], net.head)

        H = self.cfg.H
        return replace(
            self,
            pi=[rebuild(f"pi{h}", self.pi[h]) for h in range(H)],
            sigma=[rebuild(f"sigma{h}", self.sigma[h]) for h in range(H)],
            g=[[rebuild(f"g{h}.{i}", net) for i, net in enumerate(self.g[h])] for h in range(H)],
            log_width=a["log_width"] if "log_width" in a else self.log_width.copy(),
        )

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.cfg.n_features:
            raise netcore.DimensionMismatch(
                f"expected {self.cfg.n_features} covariates, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_scale


def build_model(cfg: DynamicsConfig, rng: np.random.Generator, x_mean=None, x_scale=None,
                time_shift: float = 0.0, time_scale: float = 1.0,
                eval_solver: SolverConfig | None = None) -> FlowModel:
    """Randomly initialized :class:`FlowModel` (LeCun-normal weights)."""
    d = cfg.n_features
    pi = [netcore.init_dense(cfg.pi_sizes(), "softmax", rng) for _ in range(cfg.H)]
    sigma = [netcore.init_dense(cfg.sigma_sizes(), "softmax", rng) for _ in range(cfg.H)]
    g = [[netcore.init_dense(cfg.g_sizes(), "identity", rng) for _ in range(cfg.K)]
         for _ in range(cfg.H)]
    return FlowModel(
        cfg=cfg, pi=pi, sigma=sigma, g=g,
        log_width=np.full(cfg.H, math.log(cfg.init_width)),
        x_mean=np.zeros(d) if x_mean is None else np.asarray(x_mean, dtype=float),
        x_scale=np.ones(d) if x_scale is None else np.asarray(x_scale, dtype=float),
        time_shift=float(time_shift), time_scale=float(time_scale),
        eval_solver=eval_solver or SolverConfig(),
    )


class BatchField:
    """Drift and divergence for a batch of records, with optional tape.

    The covariate gates are evaluated once at construction; the time gates
    are cached per distinct ``t``.  ``Xs`` holds standardized covariates of
    shape ``(B, n_features)``.
    """

    def __init__(self, model: FlowModel, Xs: np.ndarray, record: bool = False):
        self.model = model
        self.cfg = model.cfg
        self.B = Xs.shape[0]
        self.Xs = Xs
        self.record = record
        self.pi_probs = [netcore.forward(net, Xs) for net in model.pi]
        self.stacks = [ScalarStack.from_nets(level) for level in model.g]
        self.width = np.exp(model.log_width)
        self._sigma_cache: list[dict[float, np.ndarray]] = [{} for _ in range(self.cfg.H)]
        if record:
            self.reset_grads()

    # -- gates ---------------------------------------------------------------
    def sigma(self, h: int, t: float) -> np.ndarray:
        cache = self._sigma_cache[h]
        if t not in cache:
            cache[t] = netcore.forward(self.model.sigma[h], np.array([t]))
        return cache[t]

    def envelope(self, term: Term, t: float) -> float:
        if not term.rbf:
            return 1.0
        center = self.cfg.centers[term.level]
        return math.exp(-self.width[term.level] * (t - center) ** 2)

    def weights(self, term: Term, t: float) -> np.ndarray:
        """Effective weights ``e * q * sigma`` with shape ``(K, B)``."""
        s = self.sigma(term.level, t)[:, None] * self.envelope(term, t)
        if term.use_pi:
            return self.pi_probs[term.level].T * s
        return np.broadcast_to(s, (self.cfg.K, self.B))

    # -- evaluation ----------------------------------------------------------
    def __call__(self, t: float, z: np.ndarray, terms) -> tuple[np.ndarray, np.ndarray]:
        drift = np.zeros(self.B)
        div = np.zeros(self.B)
        for term in terms:
            g, dg = netcore.stack_forward(self.stacks[term.level], z)
            w = self.weights(term, t)
            drift += np.einsum("kb,kb->b", w, g)
            div += np.einsum("kb,kb->b", w, dg)
        return drift, div

    def drift_only(self, t: float, z: np.ndarray, terms) -> np.ndarray:
        drift = np.zeros(self.B)
        for term in terms:
            drift += np.einsum("kb,kb->b", self.weights(term, t),
                               netcore.stack_values(self.stacks[term.level], z))
        return drift

    def ode(self, terms, density: bool = True):
        """``f(t, y)`` on ``y = [z, a]`` of shape ``(2, B)``, or on ``z`` alone."""

        def f(t, y):
            drift, div = self(t, y[0], terms)
            out = np.stack([drift, div])
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"drift not finite at t={t:g}")
            return out

        def f_state(t, z):
            out = self.drift_only(t, z, terms)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"drift not finite at t={t:g}")
            return out

        return f if density else f_state

    # -- taped evaluation and reverse pass -----------------------------------
    def reset_grads(self):
        K = self.cfg.K
        self.g_wgrad = [[np.zeros_like(w) for w in st.weights] for st in self.stacks]
        self.g_bgrad = [[np.zeros_like(b) for b in st.biases] for st in self.stacks]
        self.pi_bar = [np.zeros((self.B, K)) for _ in range(self.cfg.H)]
        self.sigma_bar: list[dict[float, np.ndarray]] = [{} for _ in range(self.cfg.H)]
        self.log_width_bar = np.zeros(self.cfg.H)

    def eval_taped(self, t: float, z: np.ndarray, terms):
        drift = np.zeros(self.B)
        div = np.zeros(self.B)
        saved = []
        for term in terms:
            g, dg, tape = netcore.stack_forward(self.stacks[term.level], z, keep=True)
            w = self.weights(term, t)
            drift += np.einsum("kb,kb->b", w, g)
            div += np.einsum("kb,kb->b", w, dg)
            saved.append((term, g, dg, tape))
        return drift, div, (t, saved)

    def stage_vjp(self, saved, drift_bar: np.ndarray, div_bar: np.ndarray) -> np.ndarray:
        """Accumulate parameter cotangents; return the cotangent of ``z``."""
        t, terms = saved
        z_bar = np.zeros(self.B)
        for term, g, dg, tape in terms:
            h = term.level
            w = self.weights(term, t)
            zb, wg, bg = netcore.stack_vjp(self.stacks[h], tape, w * drift_bar, w * div_bar)
            z_bar += zb
            for l in range(len(wg)):
                self.g_wgrad[h][l] += wg[l]
                self.g_bgrad[h][l] += bg[l]
            w_bar = g * drift_bar + dg * div_bar
            env = self.envelope(term, t)
            sig = self.sigma(h, t)
            if term.use_pi:
                q = self.pi_probs[h].T
                self.pi_bar[h] += (w_bar * (env * sig[:, None])).T
                sq = np.einsum("kb,kb->k", w_bar, q)
            else:
                sq = w_bar.sum(axis=1)
            sb = self.sigma_bar[h]
            sb[t] = sb.get(t, 0.0) + env * sq
            if term.rbf:
                env_bar = float(sig @ sq)
                dist2 = (t - self.cfg.centers[h]) ** 2
                self.log_width_bar[h] += env_bar * env * (-self.width[h] * dist2)
        return z_bar

    def param_grads(self) -> dict[str, np.ndarray]:
        """Back-propagate gate cotangents and return gradients by segment name."""
        out: dict[str, np.ndarray] = {}
        model = self.model
        for h in range(self.cfg.H):
            grads, _ = netcore.vjp(model.pi[h], self.Xs, self.pi_bar[h])
            for l in range(len(model.pi[h].weights)):
                out[f"pi{h}.W{l}"], out[f"pi{h}.b{l}"] = grads[2 * l], grads[2 * l + 1]
            sb = self.sigma_bar[h]
            net = model.sigma[h]
            if sb:
                ts = np.array(sorted(sb))
                cot = np.stack([sb[t] for t in ts])
                grads, _ = netcore.vjp(net, ts[:, None], cot)
            else:
                grads = [np.zeros_like(a) for a in net.param_arrays()]
            for l in range(len(net.weights)):
                out[f"sigma{h}.W{l}"], out[f"sigma{h}.b{l}"] = grads[2 * l], grads[2 * l + 1]
            for i in range(self.cfg.K):
                for l in range(len(self.g_wgrad[h])):
                    out[f"g{h}.{i}.W{l}"] = self.g_wgrad[h][l][i]
                    out[f"g{h}.{i}.b{l}"] = self.g_bgrad[h][l][i]
        if self.cfg.hierarchy == "continuous":
            out["log_width"] = self.log_width_bar.copy()
        return out


# ---------------------------------------------------------------------------
# pointwise API


def active_terms(cfg: DynamicsConfig, t: float):
    """Terms of the drift in force at flow time ``t``."""
    for t0, t1, terms in segments(cfg):
        if t <= t1 or (t0 == 0.0 and t <= 0.0):
            return terms
    return ()


def _single(model: FlowModel, x):
    Xs = model.standardize(np.asarray(x, dtype=float).reshape(1, -1))
    return BatchField(model, Xs)


def drift(model: FlowModel, z: float, t: float, x) -> float:
    """``dz/dt`` for one record at latent value ``z`` and flow time ``t``."""
    terms = active_terms(model.cfg, t)
    if not terms:
        return 0.0
    if all(not term.use_pi for term in terms):
        # covariate gate not consulted: evaluate with a dummy record
        fld = BatchField(model, np.zeros((1, model.cfg.n_features)))
    else:
        fld = _single(model, x)
    val = float(fld(t, np.array([float(z)]), terms)[0][0])
    if not math.isfinite(val):
        raise NonFiniteError("drift not finite")
    return val


def drift_divergence(model: FlowModel, z: float, t: float, x) -> float:
    """Exact ``d drift / dz`` (the one-dimensional trace)."""
    terms = active_terms(model.cfg, t)
    if not terms:
        return 0.0
    fld = _single(model, x)
    val = float(fld(t, np.array([float(z)]), terms)[1][0])
    if not math.isfinite(val):
        raise NonFiniteError("divergence not finite")
    return val


def gate_weights(model: FlowModel, x, t: float) -> np.ndarray:
    """Effective mixture weights, flattened level-major to length ``H*K``."""
    cfg = model.cfg
    out = np.zeros((cfg.H, cfg.K))
    fld = _single(model, x)
    for term in active_terms(cfg, t):
        out[term.level] = fld.weights(term, t)[:, 0]
    return out.ravel()
