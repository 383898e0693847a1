"""From ranked attention maps to fixed-size image patches.

Each map is upsampled to the image grid, thresholded at a fraction of its
maximum, and reduced to the bounding box of its largest 4-connected response
region. That box, grown to a minimum side length and clipped to the image,
crops the input; the crop is resized to a square patch. A map with no strictly
positive response cannot be localized and raises DegenerateMap rather than
falling back silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMap, DomainError, ShapeMismatch
from .layers import resize_bilinear_array
from .tensor import Tensor


@dataclass
class CropConfig:
    """threshold_frac of the map maximum marks response; boxes grow to min_box."""

    threshold_frac: float = 0.5
    min_box: int = 4
    patch_size: int = 64

    def __post_init__(self):
        if not 0.0 < self.threshold_frac < 1.0:
            raise DomainError(f"threshold_frac must lie in (0, 1), got {self.threshold_frac}")
        if self.min_box < 1:
            raise DomainError(f"min_box must be >= 1, got {self.min_box}")
        if self.patch_size < 1:
            raise DomainError(f"patch_size must be >= 1, got {self.patch_size}")


@dataclass
class PatchSet:
    """Crops in rank order with their source boxes as (top, left, height, width)."""

    patches: list
    boxes: list
    source_size: tuple


def binarize_map(map_2d, cfg):
    """Boolean response mask: pixels >= threshold_frac * max(map)."""
    arr = np.asarray(map_2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"binarize_map: expected 2-d map, got {arr.shape}")
    peak = arr.max()
    if peak <= 0.0:
        raise DegenerateMap(f"map maximum is {peak:.3e}; no positive response to threshold")
    return arr >= cfg.threshold_frac * peak


def _components(mask):
    """4-connected components by flood fill in scan order.

    Yields (size, top, left, bottom, right) per component.
    """
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            size = 0
            top, left, bottom, right = sy, sx, sy, sx
            while stack:
                y, x = stack.pop()
                size += 1
                top = min(top, y)
                bottom = max(bottom, y)
                left = min(left, x)
                right = max(right, x)
                if y > 0 and mask[y - 1, x] and not seen[y - 1, x]:
                    seen[y - 1, x] = True
                    stack.append((y - 1, x))
                if y + 1 < h and mask[y + 1, x] and not seen[y + 1, x]:
                    seen[y + 1, x] = True
                    stack.append((y + 1, x))
                if x > 0 and mask[y, x - 1] and not seen[y, x - 1]:
                    seen[y, x - 1] = True
                    stack.append((y, x - 1))
                if x + 1 < w and mask[y, x + 1] and not seen[y, x + 1]:
                    seen[y, x + 1] = True
                    stack.append((y, x + 1))
            yield size, top, left, bottom, right


def largest_component_box(mask, cfg):
    """Tight box of the largest 4-connected region, grown to min_box and clipped.

    Component-size ties break toward the smallest (top, left) box corner.
    Returns (top, left, height, width) in mask pixels.
    """
    if not mask.any():
        raise DegenerateMap("mask has no set pixels")
    best = None
    for size, top, left, bottom, right in _components(mask):
        key = (-size, top, left)
        if best is None or key < best[0]:
            best = (key, top, left, bottom, right)
    _, top, left, bottom, right = best
    h, w = mask.shape
    box_h = bottom - top + 1
    box_w = right - left + 1
    if box_h < cfg.min_box:
        grow = cfg.min_box - box_h
        top -= grow // 2
        bottom += grow - grow // 2
    if box_w < cfg.min_box:
        grow = cfg.min_box - box_w
        left -= grow // 2
        right += grow - grow // 2
    top = max(top, 0)
    left = max(left, 0)
    bottom = min(bottom, h - 1)
    right = min(right, w - 1)
    return top, left, bottom - top + 1, right - left + 1


def extract_patches(image, att_set, cfg):
    """Crop one patch per attention map, in rank order (largest scale first).

    image: (C,H,W) tensor; att_set: RankedAttentionSet. Maps are upsampled to
    the image grid before thresholding so boxes are in image pixels.
    """
    if image.data.ndim != 3:
        raise ShapeMismatch(f"extract_patches: expected (C,H,W) image, got {image.data.shape}")
    _, img_h, img_w = image.data.shape
    patches, boxes = [], []
    for rank_pos, head_idx in enumerate(att_set.order, start=1):
        map_arr = att_set.maps[head_idx].data
        upsampled, _ = resize_bilinear_array(map_arr, img_h, img_w)
        try:
            mask = binarize_map(upsampled[0], cfg)
            top, left, box_h, box_w = largest_component_box(mask, cfg)
        except DegenerateMap as exc:
            raise DegenerateMap(f"rank {rank_pos} (head {head_idx}): {exc}") from exc
        crop = image.data[:, top:top + box_h, left:left + box_w]
        patch, _ = resize_bilinear_array(crop, cfg.patch_size, cfg.patch_size)
        patches.append(Tensor(patch))
        boxes.append((top, left, box_h, box_w))
    return PatchSet(patches=patches, boxes=boxes, source_size=(img_h, img_w))
