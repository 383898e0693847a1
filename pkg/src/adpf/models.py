"""The two networks of the staged pipeline.

AttentionNet: a small convolutional backbone feeds ranked multi-head hybrid
attention; the scaled maps are concatenated into a fully connected layer that
emits one logit per label. FusionNet: a main convolutional stream over the
whole image into which ranked patch features are concatenated one rank per
block, rank 1 earliest, so better-ranked patches pass through strictly more
of the network. Each fusion widens the stream by the stem width and the
block's convolution keeps that width.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .attention import HybridAttentionHead, attention_head_count_check, rmhha_forward
from .errors import ConfigError, FormatError, PatchCountMismatch, ShapeMismatch
from .layers import Conv2D, FullyConnected, bilinear_resize, concat_channels, maxpool2d
from .tensor import Tensor, add, concat, max0, reshape


# strictly positive floor added to the attention input features
FEATURE_FLOOR = 0.05


def _halve(s):
    return s // 2 if s >= 2 else s


def _block(conv, x, activation=max0):
    y = activation(conv(x))
    if y.data.shape[1] >= 2 and y.data.shape[2] >= 2:
        y = maxpool2d(y, 2, 2)
    return y


class AttentionNet:
    """Backbone, attention heads, and the logit head for stage-1 training."""

    def __init__(self, cfg, q, rng):
        if cfg.heads < 1:
            raise ConfigError("AttentionNet needs at least one head")
        c_p = cfg.resolved_backbone_channels()
        c_head = attention_head_count_check(cfg.heads, c_p)
        if c_head % 2 != 0:
            raise ConfigError(f"channels per head must be even, got {c_head}")
        if (c_head // 2) % cfg.bottleneck_ratio != 0:
            raise ConfigError(f"bottleneck_ratio {cfg.bottleneck_ratio} must divide "
                              f"the value width {c_head // 2}")
        self.cfg = cfg
        self.q = q
        self.map_size = cfg.input_size // 4
        self.conv1 = Conv2D(cfg.input_channels, cfg.backbone_hidden, 3, rng, padding=1)
        self.conv2 = Conv2D(cfg.backbone_hidden, c_p, 3, rng, padding=1)
        self.heads = [
            HybridAttentionHead(c_head, self.map_size, self.map_size, rng,
                                bottleneck_ratio=cfg.bottleneck_ratio)
            for _ in range(cfg.heads)
        ]
        self.head_fc = FullyConnected(cfg.heads * self.map_size * self.map_size, q, rng)

    def forward(self, image):
        """Returns (logits, RankedAttentionSet) for one (C,H,W) image."""
        expected = (self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size)
        if image.data.shape != expected:
            raise ShapeMismatch(f"AttentionNet: expected image {expected}, "
                                f"got {image.data.shape}")
        x = _block(self.conv1, image)
        x = _block(self.conv2, x)
        # a small constant floor keeps every attention input feature strictly
        # positive, so no head's map can collapse to exact zero (which would
        # break threshold-based patch extraction); being constant, the floor
        # carries no signal, so training gains nothing from coding against it
        x = add(x, Tensor(np.full(1, FEATURE_FLOOR)))
        att = rmhha_forward(self.heads, x)
        stacked = concat(att.maps, axis=0)
        logits = self.head_fc(reshape(stacked, (-1,)))
        return logits, att

    def named_parameters(self):
        params = OrderedDict()
        params["backbone.conv1.weight"] = self.conv1.weights
        params["backbone.conv1.bias"] = self.conv1.bias
        params["backbone.conv2.weight"] = self.conv2.weights
        params["backbone.conv2.bias"] = self.conv2.bias
        for i, head in enumerate(self.heads):
            base = f"heads.{i}"
            params[f"{base}.sa.q.weight"] = head.sa.proj_q.weights
            params[f"{base}.sa.k.weight"] = head.sa.proj_k.weights
            params[f"{base}.sa.v.weight"] = head.sa.proj_v.weights
            params[f"{base}.sa.rel_w"] = head.sa.rel_w
            params[f"{base}.sa.rel_h"] = head.sa.rel_h
            params[f"{base}.ca.proj.weight"] = head.ca.proj_z.weights
            params[f"{base}.ca.fc1.weight"] = head.ca.fc1.weights
            params[f"{base}.ca.fc1.bias"] = head.ca.fc1.bias
            params[f"{base}.ca.fc2.weight"] = head.ca.fc2.weights
            params[f"{base}.ca.fc2.bias"] = head.ca.fc2.bias
            params[f"{base}.scale"] = head.scale
        params["head_fc.weight"] = self.head_fc.weights
        params["head_fc.bias"] = self.head_fc.bias
        return params

    def nonneg_parameters(self):
        """Names of parameters kept nonnegative by projection during training.

        The value projections must stay elementwise nonnegative: attention
        rows are convex weights and the channel gate is positive, so with
        strictly positive input features every head's map then keeps a
        positive maximum and patch extraction stays well defined on any
        sample. Unconstrained value weights can settle a silenced head at a
        small negative constant, which is unrecoverable and poisons stage 2.
        """
        return [f"heads.{i}.sa.v.weight" for i in range(len(self.heads))]


class FusionNet:
    """Main stream plus one patch stem per rank; rank r joins before block r."""

    def __init__(self, cfg, q, rng):
        n = cfg.heads
        self.cfg = cfg
        self.q = q
        self.n_patches = n
        width = cfg.fusion_main_width
        self.main = [Conv2D(cfg.input_channels, width, 3, rng, padding=1)]
        spatial = _halve(cfg.input_size)
        for _ in range(n):
            width += cfg.fusion_stem_width
            self.main.append(Conv2D(width, width, 3, rng, padding=1))
            spatial = _halve(spatial)
        self.stems = []
        for _ in range(n):
            blocks = []
            c_in = cfg.input_channels
            for _ in range(cfg.fusion_stem_blocks):
                blocks.append(Conv2D(c_in, cfg.fusion_stem_width, 3, rng, padding=1))
                c_in = cfg.fusion_stem_width
            self.stems.append(blocks)
        self.final_channels = width
        self.final_spatial = spatial
        self.head_fc = FullyConnected(width * spatial * spatial, q, rng)

    def forward(self, image, patch_set):
        expected = (self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size)
        if image.data.shape != expected:
            raise ShapeMismatch(f"FusionNet: expected image {expected}, "
                                f"got {image.data.shape}")
        if len(patch_set.patches) != self.n_patches:
            raise PatchCountMismatch(f"expected {self.n_patches} patches, "
                                     f"got {len(patch_set.patches)}")
        feats = _block(self.main[0], image)
        for rank_idx in range(self.n_patches):
            pf = patch_set.patches[rank_idx]
            for conv in self.stems[rank_idx]:
                pf = _block(conv, pf)
            pf = bilinear_resize(pf, feats.data.shape[1], feats.data.shape[2])
            feats = concat_channels([feats, pf])
            feats = _block(self.main[rank_idx + 1], feats)
        return self.head_fc(reshape(feats, (-1,)))

    def named_parameters(self):
        params = OrderedDict()
        for r, conv in enumerate(self.main):
            params[f"main.{r}.weight"] = conv.weights
            params[f"main.{r}.bias"] = conv.bias
        for r, blocks in enumerate(self.stems):
            for b, conv in enumerate(blocks):
                params[f"stems.{r}.{b}.weight"] = conv.weights
                params[f"stems.{r}.{b}.bias"] = conv.bias
        params["head_fc.weight"] = self.head_fc.weights
        params["head_fc.bias"] = self.head_fc.bias
        return params


def load_state(net, arrays):
    """Copy checkpoint arrays into a network's parameters by name."""
    params = net.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise FormatError(f"checkpoint does not match network "
                          f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, tensor in params.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs "
                                f"parameter {tensor.data.shape}")
        tensor.data = arr.copy()
    return net


def set_requires_grad(net, flag):
    """Freeze (False) or thaw (True) every parameter of a network."""
    for tensor in net.named_parameters().values():
        tensor.requires_grad = flag
        if flag:
            if tensor.grad is None:
                tensor.zero_grad()
        else:
            tensor.grad = None
