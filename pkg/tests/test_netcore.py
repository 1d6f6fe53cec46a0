from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survflow import netcore as nc


def _perturbed(net, rng, scale=0.3):
    out = net.copy()
    for b in out.biases:
        b += scale * rng.standard_normal(b.shape)
    return out


def test_selu_constants_and_values():
    assert abs(nc.selu(np.array(1.0)) - 1.0507009873554805) < 1e-15
    assert abs(nc.selu(np.array(-1.0)) - 1.0507009873554805 * 1.6732632423543772 * (np.exp(-1) - 1)) < 1e-15
    p = np.linspace(-3, 3, 13)
    s, d1 = nc.selu_with_d1(p)
    np.testing.assert_array_equal(s, nc.selu(p))
    np.testing.assert_allclose(d1, nc.selu_d1(p), rtol=1e-15)


def test_selu_derivatives_match_differences():
    p = np.array([-2.0, -0.5, 0.3, 1.7])
    h = 1e-6
    np.testing.assert_allclose(nc.selu_d1(p), (nc.selu(p + h) - nc.selu(p - h)) / (2 * h), rtol=1e-8)
    np.testing.assert_allclose(nc.selu_d2(p), (nc.selu_d1(p + h) - nc.selu_d1(p - h)) / (2 * h),
                               rtol=1e-6, atol=1e-8)


def test_softmax_sums_to_one_and_is_shift_invariant():
    z = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 0.0]])
    s = nc.softmax(z)
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    np.testing.assert_allclose(nc.softmax(z + 7.0), s)


def test_softmax_vjp_matches_differences(rng):
    z = rng.normal(size=4)
    c = rng.normal(size=4)
    g = nc.softmax_vjp(nc.softmax(z), c)
    h = 1e-6
    fd = [(c @ nc.softmax(z + h * e) - c @ nc.softmax(z - h * e)) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-10)


@pytest.mark.parametrize("head", ["identity", "softmax"])
def test_dense_vjp_matches_differences(head, rng):
    net = _perturbed(nc.init_dense([3, 5, 4, 2], head, rng), rng)
    x = rng.normal(size=(6, 3))
    cot = rng.normal(size=(6, 2))
    grads, gx = nc.vjp(net, x, cot)

    def loss(n, xx):
        return float(np.sum(cot * nc.forward(n, xx)))

    h = 1e-6
    for arr, g in zip(net.param_arrays(), grads):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss(net, x)
            arr[idx] = old - h
            dn = loss(net, x)
            arr[idx] = old
            assert abs((up - dn) / (2 * h) - g[idx]) < 1e-6 * max(1.0, abs(g[idx]))
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        assert abs((loss(net, x + e) - loss(net, x - e)) / (2 * h) - gx[idx]) < 1e-6


def test_forward_single_vector_and_batch_agree(rng):
    net = nc.init_dense([3, 4, 2], "softmax", rng)
    x = rng.normal(size=3)
    np.testing.assert_array_equal(nc.forward(net, x), nc.forward(net, x[None])[0])


def test_dimension_checks(rng):
    net = nc.init_dense([3, 2], "identity", rng)
    with pytest.raises(nc.DimensionMismatch):
        nc.forward(net, np.zeros((2, 4)))
    with pytest.raises(nc.DimensionMismatch):
        nc.vjp(net, np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(nc.DimensionMismatch):
        nc.DenseNet((3, 2), [np.zeros((2, 2))], [np.zeros(2)])
    with pytest.raises(ValueError):
        nc.init_dense([3], "identity", rng)


def test_lecun_initialization_scale():
    net = nc.init_dense([400, 300], "identity", np.random.default_rng(0))
    assert abs(net.weights[0].std() - 1 / np.sqrt(400)) < 0.002
    assert not net.biases[0].any()


def test_zero_input_width_gives_constant_output(rng):
    net = nc.init_dense([0, 3, 4], "softmax", rng)
    net.biases[-1][:] = [0.0, 1.0, 2.0, 3.0]
    out = nc.forward(net, np.zeros((5, 0)))
    np.testing.assert_allclose(out, np.tile(nc.softmax(np.arange(4.0)), (5, 1)))


def _stack(rng, K=3, sizes=(1, 5, 4, 1)):
    nets = [_perturbed(nc.init_dense(sizes, "identity", rng), rng) for _ in range(K)]
    return nets, nc.ScalarStack.from_nets(nets)


def test_stack_matches_individual_nets(rng):
    nets, stack = _stack(rng)
    z = rng.normal(size=7)
    g, dg = nc.stack_forward(stack, z)
    for k, net in enumerate(nets):
        np.testing.assert_allclose(g[k], nc.forward(net, z[:, None])[:, 0], rtol=1e-13)
    np.testing.assert_allclose(nc.stack_values(stack, z), g, rtol=1e-13)
    h = 1e-6
    gp, _ = nc.stack_forward(stack, z + h)
    gm, _ = nc.stack_forward(stack, z - h)
    np.testing.assert_allclose(dg, (gp - gm) / (2 * h), rtol=1e-6, atol=1e-9)


def test_stack_vjp_matches_differences(rng):
    _, stack = _stack(rng)
    z = rng.normal(size=5)
    gb = rng.normal(size=(3, 5))
    db = rng.normal(size=(3, 5))
    _, _, saved = nc.stack_forward(stack, z, keep=True)
    zb, wg, bg = nc.stack_vjp(stack, saved, gb, db)

    def loss(zz):
        g, dg = nc.stack_forward(stack, zz)
        return float(np.sum(gb * g) + np.sum(db * dg))

    h = 1e-6
    for arrs, grads in ((stack.weights, wg), (stack.biases, bg)):
        for arr, g in zip(arrs, grads):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss(z)
                arr[idx] = old - h
                dn = loss(z)
                arr[idx] = old
                assert abs((up - dn) / (2 * h) - g[idx]) < 1e-6 * max(1.0, abs(g[idx]))
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        assert abs((loss(z + e) - loss(z - e)) / (2 * h) - zb[i]) < 1e-6 * max(1.0, abs(zb[i]))


def test_layout_pack_unpack_round_trip(rng):
    layout = nc.ParamLayout((("a", (2, 3)), ("b", (4,)), ("c", (1, 1))))
    assert layout.size == 11
    vec = rng.normal(size=11)
    parts = nc.unpack(layout, vec)
    assert parts["a"].shape == (2, 3)
    np.testing.assert_array_equal(nc.pack(layout, parts), vec)
    with pytest.raises(nc.DimensionMismatch):
        nc.unpack(layout, vec[:-1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(1, 6), depth=st.integers(0, 3))
def test_stack_tangent_property(seed, width, depth):
    rng = np.random.default_rng(seed)
    sizes = [1] + [width] * depth + [1]
    nets = [_perturbed(nc.init_dense(sizes, "identity", rng), rng) for _ in range(2)]
    stack = nc.ScalarStack.from_nets(nets)
    z = rng.normal(size=4)
    _, dg = nc.stack_forward(stack, z)
    h = 1e-6
    fd = (nc.stack_values(stack, z + h) - nc.stack_values(stack, z - h)) / (2 * h)
    # a kink inside the stencil can spoil the difference; tolerate only those points
    ok = np.abs(dg - fd) < 1e-5 * np.maximum(1.0, np.abs(dg))
    assert ok.mean() >= 0.75
