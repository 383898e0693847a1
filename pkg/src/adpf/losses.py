"""Regression losses over an integer label space.

Network logits are turned into a distribution by rectified normalization
(negative entries clamped to zero, then divided by the positive mass), the
prediction is the expectation of the label values under that distribution,
and training combines mean absolute error on the expectation with a KL term
against a Gaussian soft label. A separate diversity penalty discourages
attention maps from overlapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (AllNonPositive, DomainError, EmptyInput, NotADistribution,
                     OutOfRange, ShapeMismatch, TooFewMaps)
from .tensor import Tensor, absolute, add, div, log, max0, mul, scale, sub, tsum


@dataclass
class AgeLabelSpace:
    """Consecutive integer labels with the soft-label width sigma."""

    labels: np.ndarray
    sigma: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.size < 2:
            raise DomainError("label space needs at least two labels")
        if np.any(np.diff(self.labels) != 1.0):
            raise DomainError("labels must be consecutive integers")
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def from_range(cls, lo, hi, sigma):
        if hi <= lo:
            raise DomainError(f"empty label range [{lo}, {hi}]")
        return cls(np.arange(lo, hi + 1, dtype=np.float64), sigma)

    @property
    def size(self):
        return int(self.labels.size)


@dataclass
class LossWeights:
    """Weight of the diversity penalty added to the estimation loss."""

    diversity: float = 0.01

    def __post_init__(self):
        if self.diversity < 0:
            raise DomainError(f"diversity weight must be >= 0, got {self.diversity}")


def _check_distribution(arr, what):
    if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-6:
        raise NotADistribution(f"{what}: entries must be >= 0 and sum to 1 "
                               f"(sum={arr.sum():.9f}, min={arr.min():.3e})")


def diversity_loss(maps):
    """Sum over ordered pairs of distinct maps of their elementwise-product mass.

    Every unordered pair is counted twice. Requires n >= 2 maps of equal shape.
    """
    n = len(maps)
    if n < 2:
        raise TooFewMaps(f"diversity needs at least 2 maps, got {n}")
    shape = maps[0].data.shape
    for m in maps:
        if m.data.shape != shape:
            raise ShapeMismatch(f"diversity: map shapes differ ({m.data.shape} vs {shape})")
    total = None
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            term = tsum(mul(maps[i], maps[j]))
            total = term if total is None else add(total, term)
    return total


def normalize_output(logits):
    """Rectify logits and divide by the positive mass; errors if none is positive."""
    if logits.data.ndim != 1:
        raise ShapeMismatch(f"normalize_output: expected a vector, got {logits.data.shape}")
    if np.max(logits.data) <= 0.0:
        raise AllNonPositive("every logit is <= 0; cannot normalize")
    rectified = max0(logits)
    return div(rectified, tsum(rectified))


def expected_age(probs, space):
    """Expectation of the label values under a distribution over the label space."""
    if probs.data.shape != (space.size,):
        raise ShapeMismatch(f"expected_age: {probs.data.shape} vs {space.size} labels")
    _check_distribution(probs.data, "expected_age probabilities")
    return tsum(mul(probs, Tensor(space.labels)))


def mae_loss(preds, gts):
    """Mean absolute error between prediction and target vectors of length b."""
    if preds.data.ndim != 1 or preds.data.shape != gts.data.shape:
        raise ShapeMismatch(f"mae_loss: {preds.data.shape} vs {gts.data.shape}")
    b = preds.data.shape[0]
    if b == 0:
        raise EmptyInput("mae_loss: empty batch")
    return scale(tsum(absolute(sub(preds, gts))), 1.0 / b)


def label_distribution(gt, space):
    """Gaussian soft label over the label space, centered on gt and normalized."""
    if not space.labels[0] <= gt <= space.labels[-1]:
        raise OutOfRange(f"label {gt} outside [{space.labels[0]:.0f}, {space.labels[-1]:.0f}]")
    sq = (space.labels - float(gt)) ** 2
    # subtract the smallest exponent so the peak never underflows
    expo = -(sq - sq.min()) / (2.0 * space.sigma ** 2)
    weights = np.exp(expo)
    return Tensor(weights / weights.sum())


_KL_FLOOR = 1e-12


def kl_loss(p_target, p_learned):
    """KL(p_target || p_learned), with 0 log 0 = 0 and the learned side floored.

    Entries of p_learned below 1e-12 are clamped up before the log, so targets
    with mass where the learned distribution has none contribute a large but
    finite penalty. Gradients flow only into p_learned.
    """
    if p_target.data.shape != p_learned.data.shape or p_target.data.ndim != 1:
        raise ShapeMismatch(f"kl_loss: {p_target.data.shape} vs {p_learned.data.shape}")
    _check_distribution(p_target.data, "kl target")
    _check_distribution(p_learned.data, "kl learned")
    mask = p_target.data > 0.0
    entropy = float(np.sum(p_target.data[mask] * np.log(p_target.data[mask])))
    floor = Tensor(np.asarray(_KL_FLOOR))
    floored = add(max0(sub(p_learned, floor)), floor)          # max(p', 1e-12)
    cross = tsum(mul(Tensor(np.where(mask, p_target.data, 0.0)), log(floored)))
    return add(scale(cross, -1.0), Tensor(np.asarray(entropy)))


def age_estimation_loss(preds, gts, learned_dists, space, mae_weight=1.0, kl_weight=1.0):
    """MAE on expectations plus the batch-mean KL to Gaussian soft labels."""
    b = preds.data.shape[0]
    if len(learned_dists) != b or gts.data.shape != (b,):
        raise ShapeMismatch(f"age_estimation_loss: batch sizes differ "
                            f"({b} preds, {len(learned_dists)} distributions)")
    mae = mae_loss(preds, gts)
    kl_total = None
    for gt, dist in zip(gts.data, learned_dists):
        term = kl_loss(label_distribution(float(gt), space), dist)
        kl_total = term if kl_total is None else add(kl_total, term)
    kl_mean = scale(kl_total, 1.0 / b)
    return add(scale(mae, mae_weight), scale(kl_mean, kl_weight))


def attention_training_loss(estimation, diversity, weights):
    """Estimation loss plus the weighted diversity penalty."""
    return add(estimation, scale(diversity, weights.diversity))
