"""Ranked multi-head hybrid attention.

Each head owns a contiguous slice of the feature channels and produces one
single-channel map: pixel self-attention with relative position scores gives
per-channel maps, a squeeze-style channel gate weighs them, and their weighted
sum collapses to one map. A learnable scalar multiplies each head's map, and
heads are ranked by that scalar, largest first, so downstream consumers can
treat rank 1 as the most informative region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelSplitError, ShapeMismatch
from .layers import Conv2D, FullyConnected, global_maxpool, uniform_init
from .tensor import (Tensor, add, matmul, max0, mul, narrow, permute, reshape, scale,
                     sigmoid, softmax, take_per_row)


def attention_head_count_check(n, total_channels):
    """Channels per head, or ChannelSplitError when n does not divide evenly."""
    if n < 1:
        raise ChannelSplitError(f"head count must be >= 1, got {n}")
    if total_channels % n != 0:
        raise ChannelSplitError(f"{total_channels} channels cannot be split into {n} heads")
    return total_channels // n


def relative_logits(q_flat, rel_w, rel_h, h, w):
    """Relative position scores for flattened pixel queries.

    q_flat is (h*w, c) with pixels in row-major order. rel_w has one learned
    embedding per horizontal offset in [-(w-1), w-1], indexed offset + w - 1;
    rel_h likewise for vertical offsets. Returns (m_h, m_w), each (h*w, h*w),
    where m_w[i, j] = q_i . rel_w[col(j) - col(i)] and m_h uses row offsets.
    """
    n = h * w
    if q_flat.data.shape[0] != n:
        raise ShapeMismatch(f"relative_logits: {q_flat.data.shape[0]} queries for grid {h}x{w}")
    c = q_flat.data.shape[1]
    if rel_w.data.shape != (2 * w - 1, c) or rel_h.data.shape != (2 * h - 1, c):
        raise ShapeMismatch(f"relative_logits: embeddings {rel_w.data.shape}/{rel_h.data.shape} "
                            f"do not fit grid {h}x{w} with {c} channels")
    cols = np.arange(n) % w
    rows = np.arange(n) // w
    idx_w = (cols[None, :] - cols[:, None]) + (w - 1)
    idx_h = (rows[None, :] - rows[:, None]) + (h - 1)
    scores_w = matmul(q_flat, permute(rel_w, (1, 0)))          # (n, 2w-1)
    scores_h = matmul(q_flat, permute(rel_h, (1, 0)))          # (n, 2h-1)
    return take_per_row(scores_h, idx_h), take_per_row(scores_w, idx_w)


class SelfAttentionParams:
    """Projections and relative position embeddings for one pixel-attention map."""

    def __init__(self, in_channels, qk_channels, v_channels, height, width, rng):
        # pure projections: a bias would add a per-channel offset that lets a
        # whole map drift negative regardless of input, starving the
        # threshold-based patch extraction downstream
        self.proj_q = Conv2D(in_channels, qk_channels, 1, rng, bias=False)
        self.proj_k = Conv2D(in_channels, qk_channels, 1, rng, bias=False)
        self.proj_v = Conv2D(in_channels, v_channels, 1, rng, bias=False)
        # start the value projection nonnegative: with nonnegative inputs the
        # initial maps are then nonnegative, which steers optimization toward
        # coding evidence as positive response magnitude (croppable) rather
        # than as signed map levels (not croppable)
        self.proj_v.weights.data = np.abs(self.proj_v.weights.data)
        self.rel_w = uniform_init(rng, (2 * width - 1, qk_channels), qk_channels)
        self.rel_h = uniform_init(rng, (2 * height - 1, qk_channels), qk_channels)
        self.qk_channels = qk_channels
        self.v_channels = v_channels
        self.height = height
        self.width = width


def _flatten_pixels(t, channels, h, w):
    # (C,H,W) -> (H*W, C) in row-major pixel order
    return reshape(permute(t, (1, 2, 0)), (h * w, channels))


def self_attention(p, x):
    """Pixel self-attention over a (C,H,W) slice; returns (c_V, H, W).

    Scores are (q.k + relative position terms) / sqrt(c_K); each query row is
    softmax-normalized, so outputs are convex combinations of value pixels.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"self_attention: expected (C,H,W), got {x.data.shape}")
    _, h, w = x.data.shape
    if (h, w) != (p.height, p.width):
        raise ShapeMismatch(f"self_attention: grid {h}x{w} but embeddings built for "
                            f"{p.height}x{p.width}")
    q = _flatten_pixels(p.proj_q(x), p.qk_channels, h, w)
    k = _flatten_pixels(p.proj_k(x), p.qk_channels, h, w)
    v = _flatten_pixels(p.proj_v(x), p.v_channels, h, w)
    logits = matmul(q, permute(k, (1, 0)))
    m_h, m_w = relative_logits(q, p.rel_w, p.rel_h, h, w)
    logits = scale(add(add(logits, m_h), m_w), 1.0 / math.sqrt(p.qk_channels))
    attn = softmax(logits, axis=1)
    out = matmul(attn, v)                                      # (h*w, c_V)
    return permute(reshape(out, (h, w, p.v_channels)), (2, 0, 1))


class ChannelAttentionParams:
    """Squeeze-style gate: 1x1 conv, global max pool, and a bottleneck MLP."""

    def __init__(self, in_channels, v_channels, ratio, rng):
        if ratio < 1 or v_channels % ratio != 0:
            raise ShapeMismatch(f"channel gate: ratio {ratio} must divide {v_channels}")
        self.proj_z = Conv2D(in_channels, v_channels, 1, rng, bias=False)
        self.fc1 = FullyConnected(v_channels, v_channels // ratio, rng)
        self.fc2 = FullyConnected(v_channels // ratio, v_channels, rng)
        self.v_channels = v_channels
        self.ratio = ratio


def channel_weights(p, z):
    """Per-channel weights in (0, 1): conv, max pool, ReLU, bottleneck, sigmoid."""
    if z.data.ndim != 3:
        raise ShapeMismatch(f"channel_weights: expected (C,H,W), got {z.data.shape}")
    pooled = global_maxpool(p.proj_z(z))
    hidden = max0(p.fc1(max0(pooled)))
    return sigmoid(p.fc2(hidden))


def hybrid_attention(sa, w):
    """Collapse per-channel attention maps with channel weights to one map.

    sa: (c_V, H, W), w: (c_V,) -> (1, H, W), the weighted channel sum.
    """
    if sa.data.ndim != 3 or w.data.ndim != 1 or sa.data.shape[0] != w.data.shape[0]:
        raise ShapeMismatch(f"hybrid_attention: maps {sa.data.shape} vs weights {w.data.shape}")
    c, h, wd = sa.data.shape
    flat = reshape(sa, (c, h * wd))
    mixed = matmul(reshape(w, (1, c)), flat)
    return reshape(mixed, (1, h, wd))


class HybridAttentionHead:
    """One attention head: self-attention, channel gate, and a learnable scale."""

    def __init__(self, in_channels, height, width, rng, bottleneck_ratio=4):
        if in_channels % 2 != 0:
            raise ChannelSplitError(f"head needs an even channel slice, got {in_channels}")
        qkv = in_channels // 2
        self.sa = SelfAttentionParams(in_channels, qkv, qkv, height, width, rng)
        self.ca = ChannelAttentionParams(in_channels, qkv, bottleneck_ratio, rng)
        self.scale = Tensor(np.ones(1), requires_grad=True)
        self.in_channels = in_channels

    def forward(self, x_slice):
        """Returns (raw_map, scaled_map), each (1, H, W)."""
        sa = self_attention(self.sa, x_slice)
        w = channel_weights(self.ca, x_slice)
        raw = hybrid_attention(sa, w)
        return raw, mul(raw, self.scale)


@dataclass
class RankedAttentionSet:
    """Per-head maps with their scales and the rank order (indices, best first).

    maps holds the scale-multiplied maps in head order; raw_maps the maps
    before scaling. order[k] is the head index of rank k+1: scales sorted
    non-increasing, ties broken by ascending head index.
    """

    maps: list
    raw_maps: list
    scales: np.ndarray
    order: list = field(default_factory=list)

    def ranked_maps(self):
        return [self.maps[i] for i in self.order]


def rank_order(scales):
    return [int(i) for i in np.argsort(-np.asarray(scales), kind="stable")]


def rmhha_forward(heads, x):
    """Run every head on its channel slice of x (c_p, H, W) and rank the maps."""
    n = len(heads)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"rmhha_forward: expected (C,H,W), got {x.data.shape}")
    c_head = attention_head_count_check(n, x.data.shape[0])
    maps, raw_maps = [], []
    for i, head in enumerate(heads):
        if head.in_channels != c_head:
            raise ShapeMismatch(f"head {i} built for {head.in_channels} channels, "
                                f"slice has {c_head}")
        x_slice = narrow(x, 0, i * c_head, c_head)
        raw, scaled = head.forward(x_slice)
        raw_maps.append(raw)
        maps.append(scaled)
    scales = np.array([h.scale.data.item() for h in heads])
    return RankedAttentionSet(maps=maps, raw_maps=raw_maps, scales=scales,
                              order=rank_order(scales))
