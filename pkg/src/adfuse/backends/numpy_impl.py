"""Pure-numpy reference kernels.

These are the fallback implementations selected by ``ADFUSE_BACKEND=numpy``.
Convolution goes through im2col + one BLAS matmul; softmax is vectorized.
Every function here is a pure array-in/array-out kernel with no package
dependencies, so the numba twin in numba_impl.py can be validated against it.
"""

import numpy as np

NAME = "numpy"


def _im2col(x, k, stride, pad):
    """(B,C,H,W) -> columns (B, C*k*k, L) for a k x k window grid."""
    b, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(cols, x_shape, k, stride, pad):
    """Scatter-add inverse of _im2col; returns array of x_shape."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad > 0:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d_forward(x, w, b, stride, pad):
    cout, cin, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(cout, cin * k * k), cols)
    out += b.reshape(1, cout, 1)
    return out.reshape(x.shape[0], cout, ho, wo)


def conv2d_backward_dx(g, w, x_shape, stride, pad):
    cout, cin, k, _ = w.shape
    b = g.shape[0]
    gcols = np.matmul(w.reshape(cout, cin * k * k).T, g.reshape(b, cout, -1))
    return _col2im(gcols, x_shape, k, stride, pad)


def conv2d_backward_dw(g, x, w_shape, stride, pad):
    cout, cin, k, _ = w_shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    gmat = g.reshape(g.shape[0], cout, ho * wo)
    dw = np.einsum("bol,bcl->oc", gmat, cols, optimize=True)
    return dw.reshape(w_shape)


def softmax_forward(x):
    """Stabilized softmax along the last axis; x is 2D (rows, n)."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(g, y):
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return (g - dot) * y
