"""Differentiable kernel set.

Every kernel computes its forward result eagerly and, when a tape is active
and an input requires grad, records a closure with exactly the arrays the
backward pass needs. All kernels are pure: identical inputs give
bit-identical outputs (hot paths delegate to adfuse.backends, whose loops
use a fixed reduction order).
"""

from __future__ import annotations

import math

import numpy as np

from . import backends
from .autodiff import Tensor, active_tape
from .errors import InvalidConfigError, InvalidShapeError


def _record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise InvalidShapeError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    c = x.data.dtype.type(s)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def bwd(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise InvalidShapeError("mean of empty tensor")
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    inv = 1.0 / x.data.size

    def bwd(g):
        return (np.full_like(x.data, g * inv),)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    return _record(out, (x,), lambda g: (np.full_like(x.data, g),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise InvalidShapeError("concat of zero tensors")
    _same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# matmul / attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise InvalidShapeError(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.data.size == 0 or x.data.shape[-1] < 1:
        raise InvalidShapeError(f"softmax over empty tensor, shape {x.data.shape}")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.data.shape[-1]))
    y = backends.softmax_forward(flat).reshape(x.data.shape)
    out = Tensor(y)

    def bwd(g):
        n = x.data.shape[-1]
        gx = backends.softmax_backward(g.reshape(-1, n), y.reshape(-1, n))
        return (gx.reshape(x.data.shape),)

    return _record(out, (x,), bwd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; leading axes batch."""
    d = q.data.shape[-1]
    if k.data.shape[-1] != d:
        raise InvalidShapeError(f"query dim {d} != key dim {k.data.shape[-1]}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise InvalidShapeError("key/value count mismatch")
    kt = transpose_last(k)
    logits = scale(matmul(q, kt), 1.0 / math.sqrt(d))
    attn = softmax_lastdim(logits)
    return matmul(attn, v)


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# ---------------------------------------------------------------------------
# convolution / resampling


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    _same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidShapeError("conv2d expects x (B,C,H,W) and w (O,C,k,k)")
    cout, cin, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise InvalidConfigError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.data.shape[1] != cin:
        raise InvalidShapeError(f"conv2d channels {x.data.shape[1]} != weight cin {cin}")
    h, wd = x.data.shape[2], x.data.shape[3]
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise InvalidConfigError(
            f"conv2d output size not integer for input {h}x{wd}, k={k}, stride={stride}, pad={pad}"
        )
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise InvalidShapeError(f"conv2d input {h}x{wd} smaller than kernel {k} at pad {pad}")
    out = Tensor(backends.conv2d_forward(x.data, w.data, b.data, stride, pad))

    def bwd(g):
        gx = backends.conv2d_backward_dx(g, w.data, x.data.shape, stride, pad) if x.requires_grad else None
        gw = backends.conv2d_backward_dw(g, x.data, w.data.shape, stride, pad) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def avgpool2x(x: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise InvalidShapeError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y)

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
        return (gx,)

    return _record(out, (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = Tensor(y)
    b, c, h, w = x.data.shape

    def bwd(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.data.shape
    if c % groups:
        raise InvalidConfigError(f"group_norm: {groups} groups do not divide {c} channels")
    n = (c // groups) * h * w
    xg = x.data.reshape(b, groups, n)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (xg - mu) * inv_std
    xhat4 = xhat.reshape(b, c, h, w)
    gam = gamma.data.reshape(1, c, 1, 1)
    out = Tensor(xhat4 * gam + beta.data.reshape(1, c, 1, 1))

    def bwd(g):
        dxhat = (g * gam).reshape(b, groups, n)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
        gx = ((dxhat - m1 - xhat * m2) * inv_std).reshape(b, c, h, w) if x.requires_grad else None
        ggamma = (g * xhat4).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise InvalidShapeError(f"layer_norm scale/shift must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv_std if x.requires_grad else None
        red = tuple(range(x.data.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# lookup


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InvalidShapeError(
            f"embedding ids outside [0, {table.data.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)
