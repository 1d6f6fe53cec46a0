"""Small dense networks with hand-written reverse-mode derivatives.

Two code paths live here:

* :class:`DenseNet` with :func:`forward` / :func:`vjp` for batched inputs of
  any width (used for the covariate and time gates).
* "stacked scalar nets": ``K`` independent networks ``R -> R`` evaluated
  together with their derivative in the input (a forward tangent),
  and the matching reverse pass.  These back the state networks, whose input
  derivative is the divergence of the flow.

Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_LAMBDA = 1.0507009873554804934193349852946


class DimensionMismatch(ValueError):
    pass


def selu(p):
    return np.where(p > 0, SELU_LAMBDA * p, SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(p, 0.0)))


def selu_d1(p):
    return np.where(p > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(p, 0.0)))


def selu_d2(p):
    return np.where(p > 0, 0.0, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(p, 0.0)))


def selu_with_d1(p):
    """``(selu(p), selu'(p))`` sharing one ``expm1``."""
    pos = p > 0
    em1 = np.expm1(np.minimum(p, 0.0))
    scale = SELU_LAMBDA * SELU_ALPHA
    return np.where(pos, SELU_LAMBDA * p, scale * em1), np.where(pos, SELU_LAMBDA, scale * (em1 + 1.0))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_vjp(probs: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Cotangent of the logits given the cotangent of ``softmax(logits)``."""
    return probs * (cotangent - np.sum(cotangent * probs, axis=-1, keepdims=True))


@dataclass
class DenseNet:
    """Feed-forward net: SELU on hidden layers, ``head`` on the output.

    ``weights[l]`` has shape ``(out, in)``, ``biases[l]`` shape ``(out,)``.
    ``head`` is ``"identity"`` or ``"softmax"``.
    """

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "identity"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.head not in ("identity", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionMismatch("layer count does not match sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l + 1], self.sizes[l]) or b.shape != (self.sizes[l + 1],):
                raise DimensionMismatch(f"layer {l}: got W{w.shape}, b{b.shape}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.head)


def init_dense(sizes, head: str, rng: np.random.Generator) -> DenseNet:
    """LeCun-normal weights (variance ``1/fan_in``), zero biases.

    ``sizes=[n]`` (a single entry) is rejected; a net needs at least an input
    and an output layer.  ``sizes=[n, m]`` is a plain affine map.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or any(s < 0 for s in sizes) or any(s == 0 for s in sizes[1:]):
        raise ValueError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
        weights.append(rng.standard_normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(sizes), weights, biases, head)


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise DimensionMismatch(f"expected input width {net.n_in}, got shape {x.shape}")
    return x, single


def _forward_tape(net: DenseNet, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        p = h @ w.T + b
        pre.append(p)
        h = selu(p) if l < last else p
        acts.append(h)
    out = softmax(h) if net.head == "softmax" else h
    return out, acts, pre


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate ``net`` on one input vector or a ``(batch, n_in)`` array."""
    xb, single = _as_batch(net, x)
    out, _, _ = _forward_tape(net, xb)
    return out[0] if single else out


def vjp(net: DenseNet, x, cotangent):
    """Reverse-mode product ``cotangent^T J`` for parameters and input.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list
    ``[dW0, db0, dW1, db1, ...]`` summed over the batch.
    """
    xb, single = _as_batch(net, x)
    cot = np.asarray(cotangent, dtype=float)
    if single:
        cot = cot[None, :]
    if cot.shape != (xb.shape[0], net.n_out):
        raise DimensionMismatch(f"cotangent shape {cot.shape} != {(xb.shape[0], net.n_out)}")
    out, acts, pre = _forward_tape(net, xb)
    g = softmax_vjp(out, cot) if net.head == "softmax" else cot
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    for l in range(last, -1, -1):
        if l < last:
            g = g * selu_d1(pre[l])
        grads[2 * l] = g.T @ acts[l]
        grads[2 * l + 1] = g.sum(axis=0)
        g = g @ net.weights[l]
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# stacked scalar networks with input tangents


@dataclass
class ScalarStack:
    """``K`` nets ``R -> R`` of identical shape, weights stacked on axis 0.

    ``weights[l]`` has shape ``(K, out, in)``; ``biases[l]`` ``(K, out)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def from_nets(cls, nets: list[DenseNet]) -> "ScalarStack":
        return cls([np.stack([n.weights[l] for n in nets]) for l in range(len(nets[0].weights))],
                   [np.stack([n.biases[l] for n in nets]) for l in range(len(nets[0].biases))])


def stack_values(stack: ScalarStack, z: np.ndarray) -> np.ndarray:
    """Values only, shape ``(K, B)``."""
    n_layers = len(stack.weights)
    h = z[None, :, None] * stack.weights[0][:, None, :, 0] + stack.biases[0][:, None, :]
    for l in range(1, n_layers):
        h = np.matmul(selu(h), np.swapaxes(stack.weights[l], 1, 2)) + stack.biases[l][:, None, :]
    return h[:, :, 0]


def stack_forward(stack: ScalarStack, z: np.ndarray, keep: bool = False):
    """Values and input derivatives of every net at every point.

    ``z`` has shape ``(B,)``; returns ``(g, dg)`` each ``(K, B)``.  With
    ``keep=True`` also returns the tape needed by :func:`stack_vjp`.
    """
    n_layers = len(stack.weights)
    w0, b0 = stack.weights[0], stack.biases[0]
    # first layer has a single input: broadcast instead of matmul
    p = z[None, :, None] * w0[:, None, :, 0] + b0[:, None, :]
    pd = np.broadcast_to(w0[:, None, :, 0], p.shape)
    tape = []
    h = hd = None
    for l in range(n_layers):
        if l > 0:
            wt = np.swapaxes(stack.weights[l], 1, 2)
            p = np.matmul(h, wt) + stack.biases[l][:, None, :]
            pd = np.matmul(hd, wt)
        if l < n_layers - 1:
            act, s1 = selu_with_d1(p)
            if keep:
                tape.append((h, hd, p, pd, s1))
            h, hd = act, s1 * pd
        else:
            if keep:
                tape.append((h, hd, p, pd, None))
            h, hd = p, pd
    g, dg = h[:, :, 0], hd[:, :, 0]
    if keep:
        return g, dg, (z, tape)
    return g, dg


def stack_vjp(stack: ScalarStack, saved, g_bar: np.ndarray, dg_bar: np.ndarray):
    """Reverse pass through :func:`stack_forward`.

    ``g_bar``/``dg_bar`` are cotangents of shape ``(K, B)`` for the values and
    the input derivatives.  Returns ``(z_bar, weight_grads, bias_grads)``
    where ``z_bar`` has shape ``(B,)`` and the gradient lists mirror
    ``stack.weights``/``stack.biases``.
    """
    z, tape = saved
    n_layers = len(stack.weights)
    hb = g_bar[:, :, None]
    hdb = dg_bar[:, :, None]
    wg = [None] * n_layers
    bg = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        h_in, hd_in, p, pd, s1 = tape[l]
        if s1 is not None:
            # h = selu(p), hd = selu'(p) * pd; selu'' equals selu' for p <= 0
            pb = hb * s1 + hdb * np.where(p > 0, 0.0, s1) * pd
            pdb = hdb * s1
        else:
            pb, pdb = hb, hdb
        bg[l] = pb.sum(axis=1)
        if l > 0:
            w = stack.weights[l]
            wg[l] = (np.matmul(np.swapaxes(pb, 1, 2), h_in)
                     + np.matmul(np.swapaxes(pdb, 1, 2), hd_in))
            hb = np.matmul(pb, w)
            hdb = np.matmul(pdb, w)
        else:
            # p = z * w0 + b0 and pd = w0 (the input tangent is 1)
            wg[0] = (np.einsum("kbo,b->ko", pb, z) + pdb.sum(axis=1))[:, :, None]
            z_bar = np.einsum("kbo,ko->b", pb, stack.weights[0][:, :, 0])
    return z_bar, wg, bg


# ---------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class ParamLayout:
    """Ordered ``(name, shape)`` segments of a flat parameter vector."""

    segments: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.segments))

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out


def pack(layout: ParamLayout, arrays: dict[str, np.ndarray]) -> np.ndarray:
    vec = np.empty(layout.size)
    for name, sl in layout.slices().items():
        vec[sl] = np.asarray(arrays[name], dtype=float).ravel()
    return vec


def unpack(layout: ParamLayout, vec: np.ndarray) -> dict[str, np.ndarray]:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (layout.size,):
        raise DimensionMismatch(f"expected {layout.size} parameters, got {vec.shape}")
    shapes = dict(layout.segments)
    return {name: vec[sl].reshape(shapes[name]).copy() for name, sl in layout.slices().items()}
