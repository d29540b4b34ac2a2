"""Differentiable array ops used by the network and the losses.

Images are NHWC. Reductions accumulate in float64 and store back in the
tensor dtype.
"""
from __future__ import annotations

import numpy as np

from ..errors import ArgumentError, DimensionError, DomainError
from .tensor import Tensor, as_tensor, make_result


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "relu")


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward, "sigmoid")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True, dtype=np.float64)
    s = s.astype(x.data.dtype)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True, dtype=np.float64)
        return ((s * (g - dot)).astype(s.dtype),)

    return make_result(s, (x,), backward, "softmax")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input; use log_clamped")

    def backward(g):
        return (g / x.data,)

    return make_result(np.log(x.data), (x,), backward, "log")


def log_clamped(x, floor):
    """log(max(x, floor)); no gradient flows where the clamp is active."""
    x = as_tensor(x)
    if floor <= 0:
        raise DomainError(f"clamp floor must be positive, got {floor}")
    active = x.data > floor
    safe = np.where(active, x.data, floor)

    def backward(g):
        return (np.where(active, g / safe, 0.0).astype(x.data.dtype),)

    return make_result(np.log(safe), (x,), backward, "log_clamped")


def square(x):
    x = as_tensor(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return make_result(x.data * x.data, (x,), backward, "square")


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return make_result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes])) if x.ndim else 1
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.data.dtype),)

    return make_result(out, (x,), backward, "mean")


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def global_avg_pool(x):
    """Mean over the spatial axes of an NHWC tensor -> (n, c)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NHWC, got shape {x.shape}")
    n, h, w, c = x.shape
    out = np.mean(x.data, axis=(1, 2), dtype=np.float64)

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.data.dtype),)

    return make_result(out, (x,), backward, "global_avg_pool")


def _out_and_pads(size, k, stride, padding):
    if padding == "valid":
        if k > size:
            raise DimensionError(f"kernel extent {k} exceeds input extent {size} (valid padding)")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        if k > size + total:
            raise DimensionError(f"kernel extent {k} exceeds padded input extent {size + total}")
        return out, total // 2, total - total // 2
    raise ArgumentError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, kernel, stride=1, padding="same"):
    """2-D cross-correlation. x: (n, h, w, c); kernel: (kh, kw, c, f)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and (kh,kw,c,f) kernel, got {x.shape}, {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    oh, pt, pb = _out_and_pads(h, kh, stride, padding)
    ow, pl, pr = _out_and_pads(w, kw, stride, padding)
    if stride == 1:
        return _conv_shifted(x, kernel, (oh, ow), (pt, pb, pl, pr))
    return _conv_im2col(x, kernel, stride, (oh, ow), (pt, pb, pl, pr))


def _conv_shifted(x, kernel, out_hw, pads):
    # Stride-1 path. On the flattened padded input, the tap (i, j) of output
    # position p reads row p + i*wp + j, so each tap is one GEMM over a
    # contiguous slice. Rows outside the valid output window are discarded.
    n, h, w, c = x.shape
    kh, kw, _, f = kernel.shape
    oh, ow = out_hw
    pt, pb, pl, pr = pads
    hp, wp = h + pt + pb, w + pl + pr
    rows = n * hp * wp
    tail = (kh - 1) * wp + kw - 1
    flat = np.zeros((rows + tail, c), dtype=x.data.dtype)
    flat[:rows].reshape(n, hp, wp, c)[:, pt:pt + h, pl:pl + w, :] = x.data
    offsets = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    k = kernel.data
    full = flat[:rows] @ k[0, 0]
    for i, j, o in offsets[1:]:
        full += flat[o:o + rows] @ k[i, j]
    out = np.ascontiguousarray(full.reshape(n, hp, wp, f)[:, :oh, :ow, :])

    def backward(g):
        gfull = np.zeros((n, hp, wp, f), dtype=g.dtype)
        gfull[:, :oh, :ow, :] = g
        gfull = gfull.reshape(rows, f)
        dk = None
        if kernel.requires_grad:
            dk = np.empty_like(k)
            for i, j, o in offsets:
                dk[i, j] = flat[o:o + rows].T @ gfull
        dx = None
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            for i, j, o in offsets:
                dflat[o:o + rows] += gfull @ k[i, j].T
            dx = dflat[:rows].reshape(n, hp, wp, c)[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return make_result(out, (x, kernel), backward, "conv2d")


def _conv_im2col(x, kernel, stride, out_hw, pads):
    n, h, w, c = x.shape
    kh, kw, _, f = kernel.shape
    oh, ow = out_hw
    pt, pb, pl, pr = pads
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hs:stride, j:j + ws:stride, :]
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    k2 = kernel.data.reshape(kh * kw * c, f)
    out = (cols @ k2).reshape(n, oh, ow, f)

    def backward(g):
        g2 = g.reshape(n * oh * ow, f)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, oh, ow, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return make_result(out, (x, kernel), backward, "conv2d")


def max_pool2d(x, size=2, stride=None):
    """Max pooling with valid padding. Ties route the gradient to the first maximum."""
    x = as_tensor(x)
    stride = stride or size
    n, h, w, c = x.shape
    oh, _, _ = _out_and_pads(h, size, stride, "valid")
    ow, _, _ = _out_and_pads(w, size, stride, "valid")
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    windows = np.stack(
        [x.data[:, i:i + hs:stride, j:j + ws:stride, :] for i in range(size) for j in range(size)], axis=3
    )
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        for idx in range(size * size):
            i, j = divmod(idx, size)
            dx[:, i:i + hs:stride, j:j + ws:stride, :] += g * (arg == idx)
        return (dx,)

    return make_result(out, (x,), backward, "max_pool2d")


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Normalise over every axis but the last.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain numpy buffers) are updated in place as
    ``momentum * running + (1 - momentum) * batch``. Eval mode reads them only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    dtype = x.data.dtype
    channels = x.shape[-1]
    x2 = x.data.reshape(-1, channels)
    m = x2.shape[0]
    if training:
        if m < 2:
            raise DimensionError(f"batchnorm in training mode needs more than one value per channel, got shape {x.shape}")
        mu = x2.sum(axis=0, dtype=np.float64) / m
        centered = x2 - mu.astype(dtype)
        var = np.square(centered).sum(axis=0, dtype=np.float64) / m
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        var = running_var.astype(np.float64)
        centered = x2 - running_mean.astype(dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, channels)
        dgamma = np.sum(g2 * xhat, axis=0, dtype=np.float64).astype(dtype)
        dbeta = g2.sum(axis=0, dtype=np.float64).astype(dtype)
        dxhat = g2 * gamma.data
        if training:
            s1 = (dxhat.sum(axis=0, dtype=np.float64) / m).astype(dtype)
            s2 = (np.sum(dxhat * xhat, axis=0, dtype=np.float64) / m).astype(dtype)
            dx = inv * (dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv
        return dx.reshape(x.shape), dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm")
