"""Numba-jitted hot kernels.

Each output element is computed by exactly one thread with a fixed-order
inner reduction, so results are bit-identical regardless of thread count
(the determinism contract does not depend on ``numba.set_num_threads``).
fastmath stays off for the same reason.
"""

import numpy as np
from numba import njit, prange

NAME = "numba"

_JIT = {"cache": True, "fastmath": False, "nogil": True}


@njit(parallel=True, **_JIT)
def _conv2d_fwd(x, w, b, stride, pad, out):
    nb, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for idx in prange(nb * cout):
        bi = idx // cout
        co = idx % cout
        for oy in range(ho):
            for ox in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for ky in range(k):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            acc += x[bi, ci, iy, ix] * w[co, ci, ky, kx]
                out[bi, co, oy, ox] = acc


@njit(parallel=True, **_JIT)
def _conv2d_bwd_dx(g, w, stride, pad, dx):
    nb, cin, h, wd = dx.shape
    cout, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    for idx in prange(nb * cin):
        bi = idx // cin
        ci = idx % cin
        for iy in range(h):
            for ix in range(wd):
                acc = dx[bi, ci, iy, ix] * 0
                for co in range(cout):
                    for ky in range(k):
                        ny = iy + pad - ky
                        if ny < 0 or ny % stride != 0:
                            continue
                        oy = ny // stride
                        if oy >= ho:
                            continue
                        for kx in range(k):
                            nx = ix + pad - kx
                            if nx < 0 or nx % stride != 0:
                                continue
                            ox = nx // stride
                            if ox >= wo:
                                continue
                            acc += g[bi, co, oy, ox] * w[co, ci, ky, kx]
                dx[bi, ci, iy, ix] = acc


@njit(parallel=True, **_JIT)
def _conv2d_bwd_dw(g, x, stride, pad, dw):
    nb, cin, h, wd = x.shape
    cout = g.shape[1]
    k = dw.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    for idx in prange(cout * cin):
        co = idx // cin
        ci = idx % cin
        for ky in range(k):
            for kx in range(k):
                acc = dw[co, ci, ky, kx] * 0
                for bi in range(nb):
                    for oy in range(ho):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= wd:
                                continue
                            acc += g[bi, co, oy, ox] * x[bi, ci, iy, ix]
                dw[co, ci, ky, kx] = acc


@njit(parallel=True, **_JIT)
def _softmax_fwd(x, out):
    rows, n = x.shape
    for r in prange(rows):
        m = x[r, 0]
        for i in range(1, n):
            if x[r, i] > m:
                m = x[r, i]
        s = m * 0
        for i in range(n):
            e = np.exp(x[r, i] - m)
            out[r, i] = e
            s += e
        inv = 1.0 / s
        for i in range(n):
            out[r, i] *= inv


@njit(parallel=True, **_JIT)
def _softmax_bwd(g, y, out):
    rows, n = g.shape
    for r in prange(rows):
        dot = g[r, 0] * 0
        for i in range(n):
            dot += g[r, i] * y[r, i]
        for i in range(n):
            out[r, i] = (g[r, i] - dot) * y[r, i]


def conv2d_forward(x, w, b, stride, pad):
    ho = (x.shape[2] + 2 * pad - w.shape[2]) // stride + 1
    wo = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=x.dtype)
    _conv2d_fwd(x, w, b, stride, pad, out)
    return out


def conv2d_backward_dx(g, w, x_shape, stride, pad):
    dx = np.empty(x_shape, dtype=g.dtype)
    _conv2d_bwd_dx(np.ascontiguousarray(g), w, stride, pad, dx)
    return dx


def conv2d_backward_dw(g, x, w_shape, stride, pad):
    dw = np.empty(w_shape, dtype=g.dtype)
    _conv2d_bwd_dw(np.ascontiguousarray(g), x, stride, pad, dw)
    return dw


def softmax_forward(x):
    out = np.empty_like(x)
    _softmax_fwd(x, out)
    return out


def softmax_backward(g, y):
    out = np.empty_like(g)
    _softmax_bwd(np.ascontiguousarray(g), y, out)
    return out
