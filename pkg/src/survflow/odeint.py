"""Explicit Runge-Kutta integrators for small (batched) ODE systems.

Three schemes are provided:

* ``tsit5``: Tsitouras 5(4) embedded pair, adaptive.
* ``bs3``: Bogacki-Shampine 3(2) embedded pair, adaptive.
* ``rk4``: classical fourth order method on a fixed uniform grid.

States are numpy arrays of any shape; every element is treated as an
independent scalar for error control (infinity norm over the scaled error),
so a batch of records can be integrated together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Field = Callable[[float, np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    """Base class for integration failures."""


class NonFiniteError(IntegrationError):
    pass


class StepLimitError(IntegrationError):
    pass


@dataclass(frozen=True)
class Tableau:
    name: str
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    # difference between propagated and embedded weights, None for fixed schemes
    b_err: np.ndarray | None
    order: int
    # order of the embedded (error-estimating) solution
    err_order: int = 0


def _lower(rows):
    n = len(rows) + 1
    a = np.zeros((n, n))
    for i, row in enumerate(rows, start=1):
        a[i, : len(row)] = row
    return a


TSIT5 = Tableau(
    name="tsit5",
    c=np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0]),
    a=_lower(
        [
            [0.161],
            [-0.008480655492356989, 0.335480655492357],
            [2.897153057105493, -6.359448489975075, 4.3622954328695815],
            [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525],
            [5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401,
             -0.028269050394068383],
            [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
             -3.290069515436081, 2.324710524099774],
        ]
    ),
    b=np.array([0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
                -3.290069515436081, 2.324710524099774, 0.0]),
    b_err=np.array([-0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995,
                    -0.1447110071732629, 0.5823571654525552, -0.45808210592918697,
                    1.0 / 66.0]),
    order=5,
    err_order=4,
)

BS3 = Tableau(
    name="bs3",
    c=np.array([0.0, 0.5, 0.75, 1.0]),
    a=_lower([[0.5], [0.0, 0.75], [2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0]]),
    b=np.array([2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0]),
    b_err=np.array([2.0 / 9.0 - 7.0 / 24.0, 1.0 / 3.0 - 0.25, 4.0 / 9.0 - 1.0 / 3.0, -0.125]),
    order=3,
    err_order=2,
)

RK4 = Tableau(
    name="rk4",
    c=np.array([0.0, 0.5, 0.5, 1.0]),
    a=_lower([[0.5], [0.0, 0.5], [0.0, 0.0, 1.0]]),
    b=np.array([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
    b_err=None,
    order=4,
)

TABLEAUS = {t.name: t for t in (TSIT5, BS3, RK4)}


@dataclass(frozen=True)
class SolverConfig:
    """Integrator settings.

    ``method`` is one of ``"tsit5"``, ``"bs3"`` (adaptive) or ``"rk4"``
    (fixed grid of ``fixed_steps`` steps over the requested interval).
    """

    method: str = "tsit5"
    rtol: float = 1e-4
    atol: float = 1e-6
    fixed_steps: int = 16
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.fixed_steps < 1 or self.max_steps < 1:
            raise ValueError("fixed_steps and max_steps must be >= 1")

    @property
    def adaptive(self) -> bool:
        return TABLEAUS[self.method].b_err is not None


DEFAULT_EVAL = SolverConfig()
DEFAULT_TRAIN = SolverConfig(method="rk4", fixed_steps=16)


def _check(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {where}")


def _stages(tab: Tableau, field: Field, t: float, y: np.ndarray, h: float, k0=None):
    k = [None] * len(tab.c)
    k[0] = field(t, y) if k0 is None else k0
    for i in range(1, len(tab.c)):
        dy = sum(tab.a[i, j] * k[j] for j in range(i) if tab.a[i, j] != 0.0)
        k[i] = field(t + tab.c[i] * h, y + h * dy)
    return k


def rk_fixed(field: Field, y0: np.ndarray, t0: float, t1: float, n_steps: int,
             method: str = "rk4") -> np.ndarray:
    """Propagate with ``n_steps`` uniform steps of the given tableau."""
    tab = TABLEAUS[method]
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / n_steps
    for n in range(n_steps):
        t = t0 + n * h
        k = _stages(tab, field, t, y, h)
        y = y + h * sum(bi * ki for bi, ki in zip(tab.b, k) if bi != 0.0)
        _check(y, f"state at t={t + h:g}")
    return y


def _initial_step(field, t0, y0, f0, direction, order, rtol, atol, span):
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = field(t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, span)


def integrate(field: Field, y0, t0: float, t1: float,
              cfg: SolverConfig | None = None) -> np.ndarray:
    """Integrate ``dy/dt = field(t, y)`` from ``t0`` to ``t1``.

    Parameters
    ----------
    field : callable
        ``field(t, y) -> dy/dt`` with the same shape as ``y``.
    y0 : array_like
        Initial state at ``t0``.
    t0, t1 : float
        Start and end of the integration; ``t1 < t0`` integrates backward.
    cfg : SolverConfig, optional
        Defaults to adaptive Tsit5 with ``rtol=1e-4``, ``atol=1e-6``.

    Returns
    -------
    numpy.ndarray
        State at ``t1``.

    Raises
    ------
    NonFiniteError
        The field or the state became NaN or infinite.
    StepLimitError
        More than ``cfg.max_steps`` steps (accepted plus rejected) were taken.
    """
    cfg = cfg or DEFAULT_EVAL
    y = np.array(y0, dtype=float)
    _check(y, "initial state")
    if t0 == t1:
        return y
    if not cfg.adaptive:
        return rk_fixed(field, y, t0, t1, cfg.fixed_steps, cfg.method)

    tab = TABLEAUS[cfg.method]
    k_exp = tab.err_order + 1
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    fsal = tab.c[-1] == 1.0 and tab.b[-1] == 0.0 and np.allclose(tab.a[-1, :-1], tab.b[:-1])

    f0 = field(t0, y)
    _check(f0, f"field at t={t0:g}")
    h = _initial_step(field, t0, y, f0, direction, tab.order, cfg.rtol, cfg.atol, span)
    t = t0
    err_prev = 1e-4
    # PI step controller coefficients (Hairer & Wanner, IV.2)
    beta1, beta2 = 0.7 / k_exp, 0.4 / k_exp
    safety, fac_min, fac_max = 0.9, 0.2, 5.0
    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= cfg.max_steps:
            raise StepLimitError(f"exceeded max_steps={cfg.max_steps} at t={t:g}")
        steps += 1
        remaining = abs(t1 - t)
        last = h >= remaining * (1 - 1e-12)
        if last:
            h = remaining
        hs = direction * h
        k = _stages(tab, field, t, y, hs, k0=f0)
        for ki in k:
            _check(ki, f"field near t={t:g}")
        y_new = y + hs * sum(bi * ki for bi, ki in zip(tab.b, k) if bi != 0.0)
        err_vec = hs * sum(ei * ki for ei, ki in zip(tab.b_err, k) if ei != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale)) if err_vec.size else 0.0
        if not np.isfinite(err):
            raise NonFiniteError(f"non-finite error estimate near t={t:g}")
        if err <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            _check(y, f"state at t={t:g}")
            f0 = k[-1] if fsal else field(t, y)
            if err == 0.0:
                fac = fac_max
            else:
                fac = safety * err ** (-beta1) * err_prev ** beta2
            err_prev = max(err, 1e-4)
            h = h * min(fac_max, max(fac_min, fac))
        else:
            fac = max(fac_min, safety * err ** (-1.0 / k_exp))
            h = h * fac
        if h < 1e-14 * max(1.0, abs(t)):
            raise StepLimitError(f"step size underflow at t={t:g}")
    return y


def order_probe(field: Field, exact: Callable[[float], np.ndarray], y0, t0: float,
                t1: float, step_counts=(8, 16, 32, 64), method: str = "rk4") -> float:
    """Observed convergence order of a fixed-step scheme.

    Runs ``method`` with each uniform step count and returns the least-squares
    slope of ``log(error)`` against ``log(step size)``.  Returns ``nan`` when
    the error vanishes at every step count (degenerate probe).
    """
    target = np.asarray(exact(t1), dtype=float)
    hs, errs = [], []
    for n in step_counts:
        y = rk_fixed(field, y0, t0, t1, n, method)
        hs.append(abs(t1 - t0) / n)
        errs.append(float(np.max(np.abs(y - target))))
    errs = np.array(errs)
    if np.all(errs == 0.0):
        return float("nan")
    errs = np.maximum(errs, np.finfo(float).tiny)
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)
