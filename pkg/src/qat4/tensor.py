"""Dense tensor kernels.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order with NCHW
activation layout. Storage is float32 by default; reductions accumulate in
float64.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE):
    return np.ascontiguousarray(data, dtype=dtype)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _pair(v):
    if isinstance(v, int):
        return v, v
    kh, kw = v
    return int(kh), int(kw)


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integer output size")
    return span // stride + 1


def im2col_batch(x, kernel, stride=1, pad=0):
    """Lower a batch ``N x C x H x W`` to rows of receptive fields.

    Returns an array of shape ``(N*Hout*Wout, C*kh*kw)``; the column order
    (C, kh, kw) matches ``weight.reshape(Cout, -1)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got {x.shape}")
    kh, kw = _pair(kernel)
    n, c, h, w = x.shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :hout, :wout]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hout * wout, c * kh * kw)


def col2im_batch(cols, x_shape, kernel, stride=1, pad=0):
    """Adjoint of :func:`im2col_batch`; overlapping patches sum."""
    kh, kw = _pair(kernel)
    n, c, h, w = x_shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if cols.shape != (n * hout * wout, c * kh * kw):
        raise ShapeError(
            f"cols shape {cols.shape} inconsistent with input {tuple(x_shape)}")
    d = cols.reshape(n, hout, wout, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] += \
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def im2col(x, kernel, stride=1, pad=0):
    """Single image ``C x H x W`` -> ``(C*kh*kw) x (Hout*Wout)``."""
    if x.ndim != 3:
        raise ShapeError(f"expected C x H x W input, got {x.shape}")
    return np.ascontiguousarray(im2col_batch(x[None], kernel, stride, pad).T)


def col2im(cols, x_shape, kernel, stride=1, pad=0):
    """Single-image adjoint of :func:`im2col`."""
    if len(x_shape) != 3:
        raise ShapeError(f"expected a C x H x W shape, got {x_shape}")
    rows = np.ascontiguousarray(cols.T)
    return col2im_batch(rows, (1, *x_shape), kernel, stride, pad)[0]


def max_abs(x):
    x = np.asarray(x)
    if x.size == 0:
        raise DomainError("max_abs of an empty tensor")
    return float(np.max(np.abs(x)))


def global_l2_norm(tensors):
    tensors = list(tensors)
    if not tensors:
        raise DomainError("global_l2_norm needs at least one tensor")
    total = 0.0
    for t in tensors:
        t = np.asarray(t, dtype=np.float64).ravel()
        total += float(np.dot(t, t))
    return math.sqrt(total)


def all_finite(x):
    return bool(np.isfinite(x).all())


def im2col_nhwc(x, kernel, stride=1, pad=0):
    """Rows of receptive fields from an ``N x H x W x C`` batch.

    Column order is (kh, kw, C), matching
    ``weight.transpose(0, 2, 3, 1).reshape(Cout, -1)``. This is the layout the
    convolution layers use internally; it keeps the adjoint's accumulation
    contiguous in C.
    """
    kh, kw = _pair(kernel)
    n, h, w, c = x.shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, hout, wout, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * hout:stride, j:j + stride * wout:stride, :]
    return cols.reshape(n * hout * wout, kh * kw * c)


def col2im_nhwc(cols, x_shape, kernel, stride=1, pad=0):
    """Adjoint of :func:`im2col_nhwc`; returns ``N x H x W x C``."""
    kh, kw = _pair(kernel)
    n, h, w, c = x_shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if cols.shape != (n * hout * wout, kh * kw * c):
        raise ShapeError(
            f"cols shape {cols.shape} inconsistent with input {tuple(x_shape)}")
    d = cols.reshape(n, hout, wout, kh, kw, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * hout:stride, j:j + stride * wout:stride, :] += d[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out
