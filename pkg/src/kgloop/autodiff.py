"""Minimal reverse-mode automatic differentiation over numpy arrays.

Provides exactly the operations the training losses need: dense linear
algebra, elementwise activations, embedding-style row gather, numerically
stable softmax / log-sigmoid, and a batched valid 2-D convolution. All values
are float64; the finite-difference gradient checks in the test suite depend on
that precision.

Usage pattern: wrap parameter arrays in leaf `Tensor`s, compose a scalar loss,
call `backward(loss)`, then read `.grad` off the leaves. Graphs are built
fresh every step; nothing is retained between steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """A node in the computation graph: a float64 ndarray plus backward hook."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents: tuple = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; constants are promoted to leaves
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value, (a, b))

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value, (a, b))

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = back
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value, (a, b))

    def back(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    out._backward = back
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value / b.value, (a, b))

    def back(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    out._backward = back
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul expects 2-D operands; use dot for vectors")
    out = Tensor(a.value @ b.value, (a, b))

    def back(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = back
    return out


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.dot(a.value, b.value), (a, b))

    def back(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    out._backward = back
    return out


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup table[idx]; gradient scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(table.value[idx], (table,))

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, idx, g)

    out._backward = back
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.reshape(shape), (a,))

    def back(g):
        _accumulate(a, g.reshape(a.shape))

    out._backward = back
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    out._backward = back
    return out


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    expanded = []
    for p in parts:
        p = as_tensor(p)
        expanded.append(reshape(p, p.value.shape[:axis] + (1,) + p.value.shape[axis:]))
    return concat(expanded, axis=axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out._backward = back
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.value, 0.0), (a,))

    def back(g):
        _accumulate(a, g * (a.value > 0.0))

    out._backward = back
    return out


def leaky_relu(a, slope: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.where(a.value > 0.0, a.value, slope * a.value), (a,))

    def back(g):
        _accumulate(a, g * np.where(a.value > 0.0, 1.0, slope))

    out._backward = back
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = np.empty_like(a.value)
    pos = a.value >= 0.0
    v[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ev = np.exp(a.value[~pos])
    v[~pos] = ev / (1.0 + ev)
    out = Tensor(v, (a,))

    def back(g):
        _accumulate(a, g * v * (1.0 - v))

    out._backward = back
    return out


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x); stable for large |x|."""
    a = as_tensor(a)
    x = a.value
    v = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    out = Tensor(v, (a,))

    def back(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        sx = np.empty_like(x)
        pos = x >= 0.0
        sx[pos] = np.exp(-x[pos]) / (1.0 + np.exp(-x[pos]))
        sx[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
        _accumulate(a, g * sx)

    out._backward = back
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    out = Tensor(v, (a,))

    def back(g):
        _accumulate(a, g * v)

    out._backward = back
    return out


def clamped_log(a, eps: float = 1e-12) -> Tensor:
    """log(max(x, eps)); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    clamped = np.maximum(a.value, eps)
    out = Tensor(np.log(clamped), (a,))

    def back(g):
        _accumulate(a, g * np.where(a.value > eps, 1.0 / a.value, 0.0))

    out._backward = back
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    v = np.sqrt(a.value)
    out = Tensor(v, (a,))

    def back(g):
        _accumulate(a, g * 0.5 / v)

    out._backward = back
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(v, (a,))

    def back(g):
        inner = (g * v).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * v)

    out._backward = back
    return out


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng supplied (eval)."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, mask)


def conv2d_valid(x, filters) -> Tensor:
    """Valid (no padding) 2-D convolution, DL convention (cross-correlation).

    x: (B, H, W); filters: (F, kh, kw) -> out (B, F, H-kh+1, W-kw+1).
    """
    x, filters = as_tensor(x), as_tensor(filters)
    b, h, w = x.value.shape
    f, kh, kw = filters.value.shape
    windows = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw), axis=(1, 2))
    out_v = np.einsum("bijpq,fpq->bfij", windows, filters.value)
    out = Tensor(out_v, (x, filters))
    oh, ow = h - kh + 1, w - kw + 1

    def back(g):
        _accumulate(filters, np.einsum("bfij,bijpq->fpq", g, windows))
        dx = np.zeros_like(x.value)
        for p in range(kh):
            for q in range(kw):
                dx[:, p:p + oh, q:q + ow] += np.einsum(
                    "bfij,f->bij", g, filters.value[:, p, q]
                )
        _accumulate(x, dx)

    out._backward = back
    return out


def backward(loss: Tensor) -> None:
    """Seed the scalar loss with gradient 1 and run reverse topological order."""
    if loss.value.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a dict of parameter arrays as leaf tensors (shared order)."""
    return {k: Tensor(v) for k, v in params.items()}


def grads_of(leaf_map: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for k, t in leaf_map.items()
    }
