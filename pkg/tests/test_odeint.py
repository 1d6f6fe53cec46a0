from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survflow.odeint import (BS3, RK4, TSIT5, NonFiniteError, SolverConfig, StepLimitError,
                             integrate, order_probe, rk_fixed)


def grow(t, y):
    return y


@pytest.mark.parametrize("tab", [TSIT5, BS3, RK4])
def test_tableau_consistency(tab):
    # row sums of A equal the nodes, weights sum to one
    np.testing.assert_allclose(tab.a.sum(axis=1), tab.c, atol=1e-12)
    assert abs(tab.b.sum() - 1.0) < 1e-12
    if tab.b_err is not None:
        assert abs(tab.b_err.sum()) < 1e-12


def test_tsit5_order_conditions():
    b, c, a = TSIT5.b, TSIT5.c, TSIT5.a
    # conditions up to order 5 on the propagated weights (bushy trees)
    for q in range(1, 6):
        assert abs(b @ c ** (q - 1) - 1.0 / q) < 1e-10
    assert abs(b @ (a @ c) - 1.0 / 6) < 1e-10
    assert abs(b @ (a @ c**2) - 1.0 / 12) < 1e-10
    assert abs(b @ (c * (a @ c)) - 1.0 / 8) < 1e-10


@pytest.mark.parametrize("method", ["tsit5", "bs3", "rk4"])
def test_zero_field_is_exact(method):
    y = integrate(lambda t, y: np.zeros_like(y), np.array([3.7]), 0.0, 1.0, SolverConfig(method))
    assert y[0] == 3.7


@pytest.mark.parametrize("method", ["tsit5", "bs3"])
def test_exponential_growth(method):
    cfg = SolverConfig(method, rtol=1e-8, atol=1e-8)
    y = integrate(grow, np.array([1.0]), 0.0, 1.0, cfg)
    assert abs(y[0] - math.e) < 1e-6


@pytest.mark.parametrize("method", ["tsit5", "bs3", "rk4"])
def test_forward_backward_round_trip(method):
    cfg = SolverConfig(method, rtol=1e-8, atol=1e-8, fixed_steps=64)
    y1 = integrate(grow, np.array([1.0]), 0.0, 1.0, cfg)
    y0 = integrate(grow, y1, 1.0, 0.0, cfg)
    assert abs(y0[0] - 1.0) < 1e-6


def test_backward_integration_of_decay():
    # y' = -y from t=2 back to t=0 multiplies by e^2
    y = integrate(lambda t, y: -y, np.array([1.0]), 2.0, 0.0, SolverConfig(rtol=1e-9, atol=1e-9))
    assert abs(y[0] - math.exp(2.0)) < 1e-6


def test_time_dependent_field():
    # y' = cos(t) y  ->  y(t) = exp(sin t)
    y = integrate(lambda t, y: math.cos(t) * y, np.array([1.0]), 0.0, 2.0,
                  SolverConfig(rtol=1e-9, atol=1e-10))
    assert abs(y[0] - math.exp(math.sin(2.0))) < 1e-7


def test_batched_states_are_independent():
    rates = np.array([-1.0, 0.5, 2.0])
    y = integrate(lambda t, y: rates * y, np.ones(3), 0.0, 1.0, SolverConfig(rtol=1e-9, atol=1e-9))
    np.testing.assert_allclose(y, np.exp(rates), rtol=1e-7)


def test_order_probe_rk4():
    slope = order_probe(grow, lambda t: np.array([math.exp(t)]), np.array([1.0]), 0.0, 1.0)
    assert abs(slope - 4.0) < 0.3


def test_order_probe_tsit5():
    slope = order_probe(grow, lambda t: np.array([math.exp(t)]), np.array([1.0]), 0.0, 1.0,
                        method="tsit5")
    assert abs(slope - 5.0) < 0.5


def test_order_probe_degenerate():
    slope = order_probe(lambda t, y: np.zeros_like(y), lambda t: np.array([2.0]),
                        np.array([2.0]), 0.0, 1.0)
    assert math.isnan(slope)


def test_halving_steps_order_at_least_two():
    slope = order_probe(lambda t, y: -y * y, lambda t: np.array([1.0 / (1.0 + t)]),
                        np.array([1.0]), 0.0, 1.0, method="bs3")
    assert slope >= 2.0


def test_non_finite_field_raises():
    with pytest.raises(NonFiniteError):
        integrate(lambda t, y: y * np.nan, np.array([1.0]), 0.0, 1.0, SolverConfig())


def test_step_limit():
    with pytest.raises(StepLimitError):
        integrate(lambda t, y: 50 * np.cos(50 * t) * np.ones_like(y), np.array([0.0]), 0.0, 10.0,
                  SolverConfig(rtol=1e-10, atol=1e-12, max_steps=5))


def test_deterministic():
    f = lambda t, y: np.sin(t * y) - y  # noqa: E731
    a = integrate(f, np.array([0.3, 1.2]), 0.0, 1.5, SolverConfig())
    b = integrate(f, np.array([0.3, 1.2]), 0.0, 1.5, SolverConfig())
    assert a.tobytes() == b.tobytes()


def test_rk_fixed_step_count():
    calls = []

    def f(t, y):
        calls.append(t)
        return y

    rk_fixed(f, np.array([1.0]), 0.0, 1.0, 8, "rk4")
    assert len(calls) == 32


def test_invalid_config():
    with pytest.raises(ValueError):
        SolverConfig("euler")
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(fixed_steps=0)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(-2.0, 2.0), y0=st.floats(-3.0, 3.0), span=st.floats(0.1, 2.0))
def test_linear_round_trip_property(lam, y0, span):
    cfg = SolverConfig(rtol=1e-8, atol=1e-9)
    f = lambda t, y: lam * y  # noqa: E731
    y1 = integrate(f, np.array([y0]), 0.0, span, cfg)
    np.testing.assert_allclose(y1, y0 * math.exp(lam * span), rtol=1e-6, atol=1e-8)
    back = integrate(f, y1, span, 0.0, cfg)
    assert abs(back[0] - y0) <= 10 * (1e-9 + 1e-8 * abs(y0)) * math.exp(2 * abs(lam) * span)
