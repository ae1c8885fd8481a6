"""Array-valued reverse-mode automatic differentiation.

A thin tape over float64 numpy arrays: every operation returns a
``Tensor`` that remembers its parents and a closure accumulating gradients
into them. ``backward`` walks the tape in reverse topological order.
Inside a ``no_grad`` block the same operations run the identical numpy
math but skip tape construction, so inference is bit-for-bit equal to the
recorded forward pass.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the heavy lifting lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_const(other, -1.0))

    def __neg__(self):
        return mul_const(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data, parents, backward):
    if _GRAD_ENABLED:
        return Tensor(data, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def add_const(a: Tensor, c) -> Tensor:
    data = a.data + c

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))

    return _make(data, (a,), backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a python scalar or constant ndarray (no gradient into c)."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data * c

    def backward(g):
        a._accumulate(_unbroadcast(g * c, a.data.shape))

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(data, (a, b), backward)


def matmul_const(a_const: np.ndarray, b: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (e.g. a normalized adjacency)."""
    a_const = np.asarray(a_const, dtype=np.float64)
    data = a_const @ b.data

    def backward(g):
        b._accumulate(_unbroadcast(np.swapaxes(a_const, -1, -2) @ g, b.data.shape))

    return _make(data, (b,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit; smooth, so finite-difference
    gradient checks stay tight."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accumulate(g * (cdf + x * pdf))

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def softmax_masked(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with disallowed positions (mask False)
    forced to zero weight. Every row must keep at least one allowed entry."""
    masked = np.where(mask, scores.data, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    z = e.sum(axis=-1, keepdims=True)
    data = e / z

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        scores._accumulate(data * (g - dot))

    return _make(data, (scores,), backward)


def log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(g):
        a._accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gain.data * xhat + bias.data

    def backward(g):
        n = x.data.shape[-1]
        reduce_axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=reduce_axes))
        bias._accumulate(g.sum(axis=reduce_axes))
        gx_hat = g * gain.data
        term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv_std)
        del n

    return _make(data, (x, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(data, (table,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows along axis 1: out[b, k, :] = x[b, idx[b, k], :]."""
    idx = np.asarray(idx, dtype=np.int64)
    b_idx = np.arange(x.data.shape[0])[:, None]
    data = x.data[b_idx, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b_idx, idx), g)
        x._accumulate(gx)

    return _make(data, (x,), backward)


def scatter_add_rows(x: Tensor, idx: np.ndarray, v: Tensor) -> Tensor:
    """out = x, then out[b, idx[b, k], :] += v[b, k, :]. Callers zero the
    rows of ``v`` that must not land anywhere and clip their indices."""
    idx = np.asarray(idx, dtype=np.int64)
    b_idx = np.arange(x.data.shape[0])[:, None]
    data = x.data.copy()
    np.add.at(data, (b_idx, idx), v.data)

    def backward(g):
        x._accumulate(g)
        v._accumulate(g[b_idx, idx])

    return _make(data, (x, v), backward)


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[..., t] = x[..., t, idx[..., t]]."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        x._accumulate(gx)

    return _make(data, (x,), backward)
