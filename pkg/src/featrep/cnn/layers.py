"""Forward and backward kernels for the layer kinds used by the networks.

All feature maps are (N, C, H, W). Convolution is cross-correlation (no
kernel flip) computed through an im2col buffer; its adjoint
``conv_transpose`` is shared by backpropagation and the deconv module.
"""
from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(n, kernel, stride, pad, ceil_mode=False):
    span = n + 2 * pad - kernel
    if span < 0:
        return 0
    if ceil_mode:
        out = -(-span // stride) + 1
        # the last window has to start inside the input (or its left padding)
        if (out - 1) * stride >= n + pad:
            out -= 1
        return out
    return span // stride + 1


def _pad(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def im2col(x, kh, kw, stride, pad):
    """Rows are output positions (n, i, j); columns are (c, di, dj)."""
    sh, sw = stride
    xp = _pad(x, *pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def conv_forward(x, w, b, stride=(1, 1), pad=(0, 0)):
    f, c, kh, kw = w.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(f, -1).T
    out += b
    out = out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv_transpose(dout, w, in_shape, stride=(1, 1), pad=(0, 0)):
    """Adjoint of ``conv_forward`` with respect to its input."""
    n, c, h, wd = in_shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho, wo = dout.shape[2:]
    # (kh, kw, c, f) @ (f, n, ho, wo): every kernel offset comes out as one contiguous block
    wt = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    dcols = (wt @ dout.transpose(1, 0, 2, 3).reshape(f, -1)).reshape(kh, kw, c, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[i, j]
    dxp = dxp.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])


def conv_backward(dout, x_shape, cols, w, stride=(1, 1), pad=(0, 0), need_dx=True):
    f = w.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dx = conv_transpose(dout, w, x_shape, stride, pad) if need_dx else None
    return dx, dw, db


@numba.njit(cache=True)
def _pool_kernel(x, kh, kw, sh, sw, ho, wo, out, switches):
    n, c, h, w = x.shape
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                r0 = i * sh
                for j in range(wo):
                    c0 = j * sw
                    best = -np.inf
                    where = -1
                    for di in range(kh):
                        r = r0 + di
                        if r >= h:
                            break
                        for dj in range(kw):
                            col = c0 + dj
                            if col >= w:
                                break
                            v = x[a, b, r, col]
                            if where < 0 or v > best:
                                best = v
                                where = r * w + col
                    out[a, b, i, j] = best
                    switches[a, b, i, j] = where


def maxpool_forward(x, kernel, stride, ceil_mode=True):
    """Max pooling; returns the pooled map and the switches.

    Switches hold, for every pooled cell, the flat ``h * W + w`` position of
    the chosen input cell. Ties resolve to the first cell of the window in
    row-major order. With ``ceil_mode`` the window may hang over the bottom
    and right edges; the overhang never wins.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ho = conv_output_size(h, kh, sh, 0, ceil_mode)
    wo = conv_output_size(w, kw, sw, 0, ceil_mode)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    switches = np.empty((n, c, ho, wo), dtype=np.int64)
    _pool_kernel(np.ascontiguousarray(x), kh, kw, sh, sw, ho, wo, out, switches)
    return out, switches


def unpool(dout, switches, in_shape):
    """Scatter-add pooled values back to their switch positions (zero elsewhere)."""
    n, c, h, w = in_shape
    plane = h * w
    offsets = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1, 1)
    flat = np.bincount((switches + offsets).ravel(), weights=dout.ravel(), minlength=n * c * plane)
    return flat.reshape(in_shape).astype(dout.dtype, copy=False)


def maxout_forward(z, pieces):
    """Channelwise maxout: output channel ``g`` is the max of input channels ``g*k .. g*k+k-1``."""
    n, f, h, w = z.shape
    grouped = z.reshape(n, f // pieces, pieces, h, w)
    arg = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, arg[:, :, None], axis=2)[:, :, 0]
    return out, arg


def maxout_backward(dout, arg, pieces):
    n, g, h, w = dout.shape
    dz = np.zeros((n, g, pieces, h, w), dtype=dout.dtype)
    np.put_along_axis(dz, arg[:, :, None], dout[:, :, None], axis=2)
    return dz.reshape(n, g * pieces, h, w)


def relu(x):
    return np.maximum(x, 0)


def dropout_mask(shape, rate, rng, dtype=np.float64):
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
