"""Censored maximum likelihood for flow models.

The objective for records ``(y_i, delta_i, x_i)`` is the mean negative
log-likelihood::

    -(1/n) sum_i [delta_i log f(y_i | x_i) + (1 - delta_i) log S(y_i | x_i)]

Losses used for training are evaluated with fixed-step RK4 and their
gradients are obtained by reverse accumulation through every solver stage
(discretize-then-differentiate), so the gradient is exact for the discrete
map being optimized.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from . import flow
from .data import Dataset
from .dynamics import BatchField, DynamicsConfig, FlowModel, ModeError, build_model, segments
from .netcore import pack
from .odeint import NonFiniteError, SolverConfig



class Diverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    lam: float = 1.0
    seed: int = 0
    fixed_steps: int = 16
    # "nll", "hierarchical", or "auto" (hierarchical for shared-gate models)
    loss: str = "auto"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive, max_epochs >= 0")
        if self.patience < 1 or self.fixed_steps < 1:
            raise ValueError("patience and fixed_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.loss not in ("auto", "nll", "hierarchical"):
            raise ValueError(f"unknown loss {self.loss!r}")


# -- taped fixed-step integration -----------------------------------------------

def _steps_for(length: float, fixed_steps: int) -> int:
    return max(1, math.ceil(fixed_steps * length - 1e-9))


def _rk4_backward(fld: BatchField, u: np.ndarray, segs, fixed_steps: int, record: bool):
    """Integrate ``[z, a]`` from the end of ``segs`` back to flow time 0."""
    z = u.copy()
    a = np.zeros_like(z)
    tape = []
    ev = fld.eval_taped if record else None
    for t0, t1, terms in reversed(segs):
        if t1 == t0:
            continue
        n = _steps_for(t1 - t0, fixed_steps)
        h = (t0 - t1) / n
        for s in range(n):
            t = t1 + s * h
            if record:
                d1, v1, s1 = ev(t, z, terms)
                d2, v2, s2 = ev(t + 0.5 * h, z + 0.5 * h * d1, terms)
                d3, v3, s3 = ev(t + 0.5 * h, z + 0.5 * h * d2, terms)
                d4, v4, s4 = ev(t + h, z + h * d3, terms)
                tape.append((h, (s1, s2, s3, s4)))
            else:
                d1, v1 = fld(t, z, terms)
                d2, v2 = fld(t + 0.5 * h, z + 0.5 * h * d1, terms)
                d3, v3 = fld(t + 0.5 * h, z + 0.5 * h * d2, terms)
                d4, v4 = fld(t + h, z + h * d3, terms)
            z = z + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            a = a + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
    return z, a, tape


def _rk4_reverse(fld: BatchField, tape, z_bar: np.ndarray, a_bar: np.ndarray) -> np.ndarray:
    """Propagate cotangents of ``(z_end, a_end)`` back through the tape.

    ``a`` never feeds back into the field, so its cotangent is constant.
    """
    for h, (s1, s2, s3, s4) in reversed(tape):
        zb_out = z_bar
        w1, w2 = h / 6.0, h / 3.0
        zb4 = fld.stage_vjp(s4, w1 * zb_out, w1 * a_bar)
        zb3 = fld.stage_vjp(s3, w2 * zb_out + h * zb4, w2 * a_bar)
        zb2 = fld.stage_vjp(s2, w2 * zb_out + 0.5 * h * zb3, w2 * a_bar)
        zb1 = fld.stage_vjp(s1, w1 * zb_out + 0.5 * h * zb2, w1 * a_bar)
        z_bar = zb_out + zb1 + zb2 + zb3 + zb4
    return z_bar


# -- losses ---------------------------------------------------------------------

def _per_record(model: FlowModel, z0, a0, y, event):
    """Log-likelihood terms and their derivatives in ``z0`` and ``a0``."""
    log_phi = flow.latent_log_pdf(z0)
    log_s = special.log_ndtr(-z0)
    log_f = log_phi + a0 - math.log(model.time_scale) - np.log(y)
    ll = np.where(event == 1, log_f, log_s)
    # d/dz log(1 - Phi(z)) = -phi(z) / (1 - Phi(z))
    dlogs = -np.exp(log_phi - log_s)
    dz = np.where(event == 1, -z0, dlogs)
    da = (event == 1).astype(float)
    return ll, dz, da


def _resolve_kind(model: FlowModel, kind: str) -> str:
    if kind == "auto":
        return "hierarchical" if model.cfg.hierarchy == "shared-gate" else "nll"
    if kind == "hierarchical" and model.cfg.hierarchy != "shared-gate":
        raise ModeError("hierarchical loss requires hierarchy='shared-gate'")
    if kind not in ("nll", "hierarchical"):
        raise ValueError(f"unknown loss kind {kind!r}")
    return kind


def _check_finite(ll, where):
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise NonFiniteError(f"non-finite log-likelihood in {where} at record index {int(bad[0])}")


def _objective(model: FlowModel, data: Dataset, kind: str, lam, fixed_steps: int, grad: bool,
               unconditional_weight: float = 1.0):
    if len(data) == 0:
        raise ValueError("empty batch")
    kind = _resolve_kind(model, kind)
    lam = model.cfg.hierarchy_weight if lam is None else float(lam)
    n = len(data)
    y, event = data.time, data.event
    Xs = model.standardize(data.X)
    u = (np.log(y) - model.time_shift) / model.time_scale
    fld = BatchField(model, Xs, record=grad)

    parts = [(segments(model.cfg), 1.0 if kind == "nll" else lam, "conditional")]
    if kind == "hierarchical":
        parts.insert(0, (segments(model.cfg, unconditional=True), unconditional_weight,
                         "unconditional"))
    loss = 0.0
    for segs, weight, name in parts:
        if weight == 0.0 and not grad:
            continue
        z0, a0, tape = _rk4_backward(fld, u, segs, fixed_steps, record=grad)
        ll, dz, da = _per_record(model, z0, a0, y, event)
        _check_finite(ll, f"{name} flow")
        loss += -weight * float(np.mean(ll))
        if grad:
            _rk4_reverse(fld, tape, -weight * dz / n, -weight * da / n)
    if not grad:
        return loss
    g = fld.param_grads()
    return loss, pack(model.layout(), g)


def censored_nll(model: FlowModel, data: Dataset, solver: SolverConfig | None = None,
                 fixed_steps: int = 16) -> float:
    """Mean negative censored log-likelihood.

    Without ``solver`` this is the training objective (fixed-step RK4 with
    ``fixed_steps`` steps per unit flow time).  With an adaptive ``solver``
    the flow is evaluated to that tolerance instead.
    """
    if solver is None or not solver.adaptive:
        steps = fixed_steps if solver is None else solver.fixed_steps
        return _objective(model, data, "nll", None, steps, grad=False)
    if len(data) == 0:
        raise ValueError("empty batch")
    Xs = model.standardize(data.X)
    u = (np.log(data.time) - model.time_shift) / model.time_scale
    z0, a0 = flow.solve(model, u, Xs, backward=True, solver=solver)
    ll, _, _ = _per_record(model, z0, a0, data.time, data.event)
    _check_finite(ll, "conditional flow")
    return -float(np.mean(ll))


def hierarchical_loss(model: FlowModel, data: Dataset, lam: float | None = None,
                      fixed_steps: int = 16, unconditional_weight: float = 1.0) -> float:
    """Unconditional sub-flow NLL plus ``lam`` times the conditional NLL.

    The unconditional sub-flow integrates only up to the gate time with the
    covariate gate replaced by 1; its output is scored as an event time
    through the same affine-exp map.  ``lam`` defaults to the model's
    ``hierarchy_weight``.
    """
    return _objective(model, data, "hierarchical", lam, fixed_steps, grad=False,
                      unconditional_weight=unconditional_weight)


def loss_and_gradient(model: FlowModel, data: Dataset, kind: str = "nll",
                      lam: float | None = None, fixed_steps: int = 16):
    """Training loss and its exact gradient as a flat vector (``model.layout()`` order)."""
    return _objective(model, data, kind, lam, fixed_steps, grad=True)


def gradient(model: FlowModel, data: Dataset, kind: str = "nll", lam: float | None = None,
             fixed_steps: int = 16) -> np.ndarray:
    return loss_and_gradient(model, data, kind, lam, fixed_steps)[1]


def loss_value(model: FlowModel, data: Dataset, kind: str = "nll", lam: float | None = None,
               fixed_steps: int = 16) -> float:
    """Forward-only evaluation of exactly the function :func:`gradient` differentiates."""
    return _objective(model, data, kind, lam, fixed_steps, grad=False)


# -- fitting --------------------------------------------------------------------

def init_model(cfg: DynamicsConfig, train: Dataset, seed: int = 0,
               eval_solver: SolverConfig | None = None) -> FlowModel:
    """Fresh model with covariate and log-time normalization from ``train``."""
    mean, scale = train.standardization()
    log_y = np.log(train.time)
    shift = float(np.mean(log_y)) if len(train) else 0.0
    spread = float(np.std(log_y)) if len(train) > 1 else 1.0
    return build_model(cfg, np.random.default_rng(seed), mean, scale,
                       time_shift=shift, time_scale=spread if spread > 0 else 1.0,
                       eval_solver=eval_solver)


@dataclass
class FitState:
    """Everything needed to continue an interrupted run exactly."""

    theta: np.ndarray
    best_theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    best_valid: float = math.inf
    best_epoch: int = 0
    since_best: int = 0
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    stopped: bool = False


@dataclass
class FitResult:
    model: FlowModel
    state: FitState
    wall_time: float = 0.0

    @property
    def train_loss(self) -> list[float]:
        return self.state.train_loss

    @property
    def valid_loss(self) -> list[float]:
        return self.state.valid_loss

    @property
    def best_epoch(self) -> int:
        return self.state.best_epoch

    @property
    def epochs_run(self) -> int:
        return self.state.epoch


def _emit(event: dict, stream=None):
    stream = stream if stream is not None else sys.stderr
    stream.write(json.dumps(event) + "\n")
    stream.flush()


def fit(train: Dataset, valid: Dataset, cfg: TrainConfig, model0: FlowModel,
        verbose: bool = False, log_stream=None, resume: FitState | None = None,
        epoch_budget: int | None = None) -> FitResult:
    """Adam with cosine learning-rate decay and early stopping.

    Parameters
    ----------
    train, valid : Dataset
        Minibatches are drawn from ``train``; ``valid`` drives early stopping
        through its censored NLL.
    cfg : TrainConfig
    model0 : FlowModel
        Architecture, normalization and initial parameters.
    verbose : bool
        Emit one JSON line per epoch to ``log_stream`` (default stderr).
    resume : FitState, optional
        State from an earlier call with the same data and config.  Batch
        order depends only on ``(cfg.seed, epoch)``, so resuming reproduces
        an uninterrupted run.
    epoch_budget : int, optional
        Run at most this many epochs in this call (the schedule still spans
        ``cfg.max_epochs``), leaving a resumable state.

    Returns
    -------
    FitResult
        ``model`` carries the parameters with the lowest validation loss
        (the initial parameters count as epoch 0).
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and validation splits must be nonempty")
    kind = _resolve_kind(model0, cfg.loss)
    n = len(train)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    total = max(1, cfg.max_epochs * n_batches)

    def valid_nll(params):
        try:
            return censored_nll(model0.with_params(params), valid, fixed_steps=cfg.fixed_steps)
        except NonFiniteError as exc:
            raise Diverged(str(exc)) from exc

    if resume is None:
        theta = model0.params()
        st = FitState(theta=theta, best_theta=theta.copy(), m=np.zeros_like(theta),
                      v=np.zeros_like(theta))
        st.best_valid = valid_nll(theta)
        st.valid_loss.append(st.best_valid)
    else:
        st = FitState(**{k: (v.copy() if isinstance(v, (np.ndarray, list)) else v)
                         for k, v in vars(resume).items()})
    start = time.perf_counter()
    last = cfg.max_epochs if epoch_budget is None else min(cfg.max_epochs, st.epoch + epoch_budget)
    while not st.stopped and st.epoch < last:
        st.epoch += 1
        perm = np.random.default_rng([cfg.seed, st.epoch]).permutation(n)
        batch_losses = []
        for b in range(n_batches):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            try:
                loss, g = loss_and_gradient(model0.with_params(st.theta), train.subset(idx), kind,
                                            cfg.lam, cfg.fixed_steps)
            except NonFiniteError as exc:
                raise Diverged(f"epoch {st.epoch}: {exc}") from exc
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise Diverged(f"epoch {st.epoch}: loss or gradient is not finite")
            batch_losses.append(loss)
            st.step += 1
            lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(st.step - 1, total) / total))
            st.m = cfg.beta1 * st.m + (1 - cfg.beta1) * g
            st.v = cfg.beta2 * st.v + (1 - cfg.beta2) * g * g
            m_hat = st.m / (1 - cfg.beta1 ** st.step)
            v_hat = st.v / (1 - cfg.beta2 ** st.step)
            st.theta = st.theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        vl = valid_nll(st.theta)
        st.train_loss.append(float(np.mean(batch_losses)))
        st.valid_loss.append(vl)
        if verbose:
            _emit({"event": "epoch", "epoch": st.epoch, "train_loss": st.train_loss[-1],
                   "valid_loss": vl, "wall_time": round(time.perf_counter() - start, 3)},
                  log_stream)
        if vl < st.best_valid:
            st.best_valid, st.best_theta, st.since_best = vl, st.theta.copy(), 0
            st.best_epoch = st.epoch
        else:
            st.since_best += 1
            st.stopped = st.since_best >= cfg.patience
    return FitResult(model0.with_params(st.best_theta), st, time.perf_counter() - start)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
