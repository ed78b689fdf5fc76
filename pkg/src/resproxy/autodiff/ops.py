"""Elementwise, reduction and shape ops with registered backward rules."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_node


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    # Singleton-axis broadcasting only: equal rank (or a scalar), extents equal or 1.
    if a.ndim == 0 or b.ndim == 0 or a.size == 1 or b.size == 1:
        return
    if a.ndim != b.ndim:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}: rank differs")
    for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n and m != 1 and n != 1:
            raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape} on axis {axis}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return make_node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= -1):
        raise ValueError("log1p of value <= -1")
    ad = a.data
    return make_node(np.log1p(ad), (a,), lambda g: (g / (1.0 + ad),))


def relu(a) -> Tensor:
    """max(a, 0); zero gradient on the clamped side."""
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    factor = np.where(a.data >= 0, 1.0, slope)
    return make_node(a.data * factor, (a,), lambda g: (g * factor,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(a, b) -> Tensor:
    """mean((a - b)^2)."""
    return mean(square(sub(a, b)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_node(np.array(a.data[index]), (a,), bw)


def take(a, flat_index) -> Tensor:
    """Gather elements of the flattened tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(flat_index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(int(np.prod(shape)))
        np.add.at(out, idx.reshape(-1), g.reshape(-1))
        return (out.reshape(shape),)

    return make_node(a.data.reshape(-1)[idx], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return make_node(out, tensors, bw)


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_node(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def where_mask(a, mask) -> Tensor:
    """Multiply by a fixed 0/1 mask (no gradient to the mask)."""
    m = np.asarray(mask, dtype=np.float64)
    a = as_tensor(a)
    _check_broadcast(a.data, m)
    sa = a.shape
    return make_node(a.data * m, (a,), lambda g: (_unbroadcast(g * m, sa),))


def matmul(a, b) -> Tensor:
    """2-D (or batched-left) matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_node(ad @ bd, (a, b), bw)
