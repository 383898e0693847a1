"""Convolution, pooling, fully connected, and resampling building blocks.

All spatial tensors are channel-first (C, H, W). Convolution is implemented
by materializing the patch matrix (im2col) so the inner product runs as one
matmul; the backward pass scatters through the same layout. Pooling breaks
ties toward the first maximum in row-major window order, which keeps the
backward scatter deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeMismatch
from .tensor import Tensor, _accum, _as_tensor, _emit, _tracked, active_tape, add, matmul, reshape


def uniform_init(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _im2col(xp, k, stride, out_h, out_w):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = as_strided(
        xp,
        shape=(c, out_h, out_w, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    )
    return windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c * k * k)


def conv2d(x, weights, bias=None, stride=1, padding=0):
    """2-d cross-correlation. x: (C,H,W), weights: (O,C,k,k), bias: (O,) or None."""
    x, weights = _as_tensor(x), _as_tensor(weights)
    bias = _as_tensor(bias) if bias is not None else None
    if x.data.ndim != 3 or weights.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.data.shape}, weights {weights.data.shape}")
    c, h, w = x.data.shape
    o, ci, k, k2 = weights.data.shape
    if ci != c or k != k2 or (bias is not None and bias.data.shape != (o,)):
        raise ShapeMismatch(f"conv2d: weights {weights.data.shape} "
                            f"do not match input {x.data.shape}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"conv2d: kernel {k} exceeds padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)                # (HoWo, Ckk)
    wmat = weights.data.reshape(o, -1)                         # (O, Ckk)
    data = (cols @ wmat.T).T.reshape(o, out_h, out_w)
    if bias is not None:
        data = data + bias.data[:, None, None]
    tape = active_tape()
    tracked = _tracked(tape, x, weights, bias) if bias is not None \
        else _tracked(tape, x, weights)
    if not tracked:
        return Tensor(data)

    def bw(g):
        gr = g.reshape(o, -1)                                  # (O, HoWo)
        if bias is not None:
            _accum(bias, g.sum(axis=(1, 2)))
        _accum(weights, (gr @ cols).reshape(o, c, k, k))
        gcols = gr.T @ wmat                                    # (HoWo, Ckk)
        gwin = gcols.reshape(out_h, out_w, c, k, k).transpose(2, 0, 1, 3, 4)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + out_h * stride:stride, kj:kj + out_w * stride:stride] += gwin[:, :, :, ki, kj]
        _accum(x, gxp[:, padding:padding + h, padding:padding + w])

    return _emit(tape, data, bw)


def maxpool2d(x, k=2, stride=2):
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"maxpool2d: expected (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    if h < k or w < k:
        raise ShapeMismatch(f"maxpool2d: window {k} exceeds input {h}x{w}")
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    s0, s1, s2 = x.data.strides
    windows = as_strided(
        x.data,
        shape=(c, out_h, out_w, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    ).reshape(c, out_h, out_w, k * k).copy()
    arg = windows.argmax(axis=3)                               # first max in window scan order
    data = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    tape = active_tape()
    if not _tracked(tape, x):
        return Tensor(data)
    gy, gx_ = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    src_h = gy[None] * stride + arg // k                       # (C, Ho, Wo)
    src_w = gx_[None] * stride + arg % k
    chan = np.arange(c)[:, None, None] * (h * w)
    flat_idx = (chan + src_h * w + src_w).ravel()

    disjoint = stride >= k  # no pixel feeds two windows, so plain assignment works

    def bw(g):
        gx = np.zeros(c * h * w)
        if disjoint:
            gx[flat_idx] = g.ravel()
        else:
            np.add.at(gx, flat_idx, g.ravel())
        _accum(x, gx.reshape(c, h, w))

    return _emit(tape, data, bw)


def global_maxpool(x):
    """Per-channel maximum over the spatial grid; returns shape (C,)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"global_maxpool: expected (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    flat = x.data.reshape(c, -1)
    arg = flat.argmax(axis=1)
    data = flat[np.arange(c), arg]
    tape = active_tape()
    if not _tracked(tape, x):
        return Tensor(data)

    def bw(g):
        gx = np.zeros_like(flat)
        gx[np.arange(c), arg] = g
        _accum(x, gx.reshape(c, h, w))

    return _emit(tape, data, bw)


def concat_channels(tensors):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat_channels: empty list")
    spatial = ts[0].data.shape[1:]
    for t in ts:
        if t.data.ndim != 3 or t.data.shape[1:] != spatial:
            raise ShapeMismatch(f"concat_channels: spatial extents differ "
                                f"({t.data.shape} vs (*, {spatial[0]}, {spatial[1]}))")
    from .tensor import concat
    return concat(ts, axis=0)


def _resize_grid(n_in, n_out):
    """Corner-aligned source coordinates; a single output row samples index 0."""
    if n_out == 1 or n_in == 1:
        coords = np.zeros(n_out)
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    frac = coords - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def resize_bilinear_array(arr, out_h, out_w):
    """Corner-aligned bilinear resize of a (C,H,W) float array."""
    y0, y1, ty = _resize_grid(arr.shape[1], out_h)
    x0, x1, tx = _resize_grid(arr.shape[2], out_w)
    wa = ((1 - ty)[:, None]) * ((1 - tx)[None, :])
    wb = ((1 - ty)[:, None]) * (tx[None, :])
    wc = (ty[:, None]) * ((1 - tx)[None, :])
    wd = (ty[:, None]) * (tx[None, :])
    a = arr[:, y0[:, None], x0[None, :]]
    b = arr[:, y0[:, None], x1[None, :]]
    c = arr[:, y1[:, None], x0[None, :]]
    d = arr[:, y1[:, None], x1[None, :]]
    out = wa * a + wb * b + wc * c + wd * d
    return out, (y0, y1, x0, x1, wa, wb, wc, wd)


def bilinear_resize(x, out_h, out_w):
    """Differentiable corner-aligned bilinear resize of a (C,H,W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"bilinear_resize: expected (C,H,W), got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("bilinear_resize: target size must be positive")
    data, (y0, y1, x0, x1, wa, wb, wc, wd) = resize_bilinear_array(x.data, out_h, out_w)
    tape = active_tape()
    if not _tracked(tape, x):
        return Tensor(data)
    c = x.data.shape[0]
    chan = np.arange(c)[:, None, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (chan, y0[:, None], x0[None, :]), wa * g)
        np.add.at(gx, (chan, y0[:, None], x1[None, :]), wb * g)
        np.add.at(gx, (chan, y1[:, None], x0[None, :]), wc * g)
        np.add.at(gx, (chan, y1[:, None], x1[None, :]), wd * g)
        _accum(x, gx)

    return _emit(tape, data, bw)


class Conv2D:
    """kxk convolution layer; weights drawn uniform +-sqrt(1/fan_in).

    bias=False gives the pure-projection form used by the attention q/k/v/z
    maps, where a per-channel offset would be a spurious degree of freedom.
    """

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 bias=True):
        fan_in = in_channels * kernel * kernel
        self.weights = uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (out_channels,), fan_in) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.weights, self.bias, self.stride, self.padding)


class FullyConnected:
    """Affine map on flat vectors: y = W x + b."""

    def __init__(self, in_features, out_features, rng):
        self.weights = uniform_init(rng, (out_features, in_features), in_features)
        self.bias = uniform_init(rng, (out_features,), in_features)
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x):
        x = _as_tensor(x)
        if x.data.shape != (self.in_features,):
            raise ShapeMismatch(f"fully connected: expected ({self.in_features},), "
                                f"got {x.data.shape}")
        y = matmul(self.weights, reshape(x, (self.in_features, 1)))
        return add(reshape(y, (self.out_features,)), self.bias)
