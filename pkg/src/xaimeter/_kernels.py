"""Hot convolution and pooling kernels.

Two interchangeable implementations live here: explicit loops compiled with
numba, and vectorised numpy.  The numba path is used by default; set
``XAIMETER_DISABLE_NUMBA=1`` before import to force the numpy path (useful
for debugging, or where numba is unavailable).

All arrays are NHWC float64.  Convolutions are stride 1 with symmetric zero
padding; max pooling is non-overlapping.  Ties inside a pooling window route
the gradient to the first maximum in row-major order, on both paths.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("XAIMETER_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def _jit(fn):
    if not HAS_NUMBA:  # pragma: no cover
        return fn
    return njit(cache=True, fastmath=False)(fn)


# ---------------------------------------------------------------- numpy path

def conv2d_forward_np(x, w, b, pad):
    kh, kw = w.shape[:2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N, H', W', C, kh, kw
    out = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))
    return out + b


def conv2d_backward_input_np(w, dout, in_shape, pad):
    n, h, wd, c = in_shape
    kh, kw, _, f = w.shape
    ho, wo = dout.shape[1:3]
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    d2 = dout.reshape(-1, f)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += (d2 @ w[i, j].T).reshape(n, ho, wo, c)
    return np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + wd, :])


def conv2d_backward_params_np(x, w_shape, dout, pad):
    kh, kw, c, f = w_shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, f)
    dw = np.empty(w_shape)
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = xp[:, i:i + ho, j:j + wo, :].reshape(-1, c).T @ d2
    return dw, d2.sum(axis=0)


def maxpool_forward_np(x, size):
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    blocks = x[:, :ho * size, :wo * size, :].reshape(n, ho, size, wo, size, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward_np(dout, idx, in_shape, size):
    n, h, w, c = in_shape
    ho, wo = dout.shape[1:3]
    blocks = np.zeros((n, ho, wo, c, size * size))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape)
    dx[:, :ho * size, :wo * size, :] = blocks.reshape(n, ho * size, wo * size, c)
    return dx


# ---------------------------------------------------------------- numba path

@_jit
def _conv2d_forward_nb(x, w, b, pad):
    n, h, wd, c = x.shape
    kh, kw, _, f = w.shape
    ho = h + 2 * pad - kh + 1
    wo = wd + 2 * pad - kw + 1
    out = np.empty((n, ho, wo, f))
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                for o in range(f):
                    out[s, y, xx, o] = b[o]
                for i in range(kh):
                    yi = y + i - pad
                    if yi < 0 or yi >= h:
                        continue
                    for j in range(kw):
                        xj = xx + j - pad
                        if xj < 0 or xj >= wd:
                            continue
                        for ch in range(c):
                            v = x[s, yi, xj, ch]
                            for o in range(f):
                                out[s, y, xx, o] += v * w[i, j, ch, o]
    return out


@_jit
def _conv2d_backward_input_nb(w, dout, n, h, wd, pad):
    kh, kw, c, f = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros((n, h, wd, c))
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                for i in range(kh):
                    yi = y + i - pad
                    if yi < 0 or yi >= h:
                        continue
                    for j in range(kw):
                        xj = xx + j - pad
                        if xj < 0 or xj >= wd:
                            continue
                        for ch in range(c):
                            acc = 0.0
                            for o in range(f):
                                acc += dout[s, y, xx, o] * w[i, j, ch, o]
                            dx[s, yi, xj, ch] += acc
    return dx


@_jit
def _conv2d_backward_params_nb(x, kh, kw, dout, pad):
    n, h, wd, c = x.shape
    f = dout.shape[3]
    ho, wo = dout.shape[1], dout.shape[2]
    dw = np.zeros((kh, kw, c, f))
    db = np.zeros(f)
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                for o in range(f):
                    db[o] += dout[s, y, xx, o]
                for i in range(kh):
                    yi = y + i - pad
                    if yi < 0 or yi >= h:
                        continue
                    for j in range(kw):
                        xj = xx + j - pad
                        if xj < 0 or xj >= wd:
                            continue
                        for ch in range(c):
                            v = x[s, yi, xj, ch]
                            for o in range(f):
                                dw[i, j, ch, o] += v * dout[s, y, xx, o]
    return dw, db


@_jit
def _maxpool_forward_nb(x, size):
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    out = np.empty((n, ho, wo, c))
    idx = np.empty((n, ho, wo, c), dtype=np.int64)
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    best = x[s, y * size, xx * size, ch]
                    arg = 0
                    for i in range(size):
                        for j in range(size):
                            v = x[s, y * size + i, xx * size + j, ch]
                            if v > best:
                                best = v
                                arg = i * size + j
                    out[s, y, xx, ch] = best
                    idx[s, y, xx, ch] = arg
    return out, idx


@_jit
def _maxpool_backward_nb(dout, idx, n, h, w, c, size):
    dx = np.zeros((n, h, w, c))
    ho, wo = dout.shape[1], dout.shape[2]
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                for ch in range(c):
                    a = idx[s, y, xx, ch]
                    dx[s, y * size + a // size, xx * size + a % size, ch] = dout[s, y, xx, ch]
    return dx


def conv2d_forward_nb(x, w, b, pad):
    return _conv2d_forward_nb(np.ascontiguousarray(x, dtype=np.float64), w, b, pad)


def conv2d_backward_input_nb(w, dout, in_shape, pad):
    n, h, wd, _ = in_shape
    return _conv2d_backward_input_nb(np.ascontiguousarray(w), np.ascontiguousarray(dout, dtype=np.float64),
                                     n, h, wd, pad)


def conv2d_backward_params_nb(x, w_shape, dout, pad):
    return _conv2d_backward_params_nb(np.ascontiguousarray(x, dtype=np.float64), w_shape[0], w_shape[1],
                                      np.ascontiguousarray(dout, dtype=np.float64), pad)


def maxpool_forward_nb(x, size):
    return _maxpool_forward_nb(np.ascontiguousarray(x, dtype=np.float64), size)


def maxpool_backward_nb(dout, idx, in_shape, size):
    n, h, w, c = in_shape
    return _maxpool_backward_nb(np.ascontiguousarray(dout, dtype=np.float64), idx, n, h, w, c, size)


# ------------------------------------------------------------------ dispatch

if USE_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward_input = conv2d_backward_input_nb
    conv2d_backward_params = conv2d_backward_params_nb
    maxpool_forward = maxpool_forward_nb
    maxpool_backward = maxpool_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_input = conv2d_backward_input_np
    conv2d_backward_params = conv2d_backward_params_np
    maxpool_forward = maxpool_forward_np
    maxpool_backward = maxpool_backward_np

BACKEND = "numba" if USE_NUMBA else "numpy"
