"""Two-stage training, prediction, and evaluation metrics.

Stage 1 trains AttentionNet on estimation loss plus the weighted diversity
penalty. Stage 2 freezes AttentionNet, recomputes ranked patches from it for
every sample it sees, and trains FusionNet on the estimation loss alone.
All randomness (shuffling, augmentation) flows from generators derived from
the config seed, so identical configs retrain identically.
"""

from __future__ import annotations

import numpy as np

from .data import augment
from .errors import EmptyInput, NumericalFailure, TooFewMaps
from .losses import (LossWeights, age_estimation_loss, diversity_loss, expected_age,
                     label_distribution, normalize_output)
from .models import set_requires_grad
from .patches import extract_patches
from .tensor import GradTape, Tensor, backward, concat, max0, mul, reshape, scale, tsum


def seed_streams(seed):
    """Independent deterministic generators for each consumer of randomness."""
    names = ("attention_init", "fusion_init", "stage1", "stage2")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def lr_at(epoch, cfg):
    """Step schedule: the initial rate decayed once per lr_decay_every epochs."""
    return cfg.lr_initial * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


class SGD:
    """Stochastic gradient descent with optional momentum and projection.

    Parameters named in `nonneg` are clipped to be elementwise nonnegative
    after every step (projected SGD); the projection is part of the update
    rule, not of the differentiated graph.
    """

    def __init__(self, params, momentum=0.0, nonneg=()):
        self.params = params  # OrderedDict name -> Tensor
        self.momentum = momentum
        self.nonneg = frozenset(nonneg)
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()} \
            if momentum > 0 else None

    def step(self, lr):
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                t.data -= lr * v
            else:
                t.data -= lr * g
            if name in self.nonneg:
                np.maximum(t.data, 0.0, out=t.data)
            t.zero_grad()


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(loss_value, batch_samples, stage):
    if not np.isfinite(loss_value):
        ids = [s.id for s in batch_samples]
        raise NumericalFailure(f"non-finite loss in {stage} (batch {ids})", batch_ids=ids)


def train_stage1(anet, samples, cfg, space):
    """Train AttentionNet; returns per-epoch rows for the loss trace CSV."""
    if not samples:
        raise EmptyInput("train_stage1: no samples")
    rng = seed_streams(cfg.seed)["stage1"]
    optimizer = SGD(anet.named_parameters(), momentum=cfg.momentum,
                    nonneg=anet.nonneg_parameters())
    weights = LossWeights(diversity=cfg.lambda_)
    rows = []
    n = len(samples)
    for epoch in range(cfg.epochs_stage1):
        lr = lr_at(epoch, cfg)
        sum_ae = sum_div = sum_total = 0.0
        for batch_idx in _batches(n, cfg.batch_size, rng):
            batch = [samples[i] for i in batch_idx]
            if cfg.augment:
                batch = [augment(s, cfg.augment_pad, rng) for s in batch]
            with GradTape():
                preds, dists, divs = [], [], []
                for s in batch:
                    logits, att = anet.forward(s.image)
                    probs = normalize_output(logits)
                    dists.append(probs)
                    preds.append(reshape(expected_age(probs, space), (1,)))
                    if len(att.raw_maps) >= 2:
                        # Penalize overlap of the positive responses only: the
                        # signed product is unbounded below (sign-split maps
                        # would be rewarded without limit), and cropping only
                        # ever sees the positive part of a map.
                        divs.append(diversity_loss([max0(m) for m in att.raw_maps]))
                gts = Tensor(np.array([s.label for s in batch], dtype=np.float64))
                ae = age_estimation_loss(concat(preds), gts, dists, space,
                                         cfg.mae_weight, cfg.kl_weight)
                if divs:
                    div_sum = divs[0]
                    for d in divs[1:]:
                        div_sum = div_sum + d
                    div = scale(div_sum, 1.0 / len(divs))
                else:
                    div = Tensor(np.asarray(0.0))
                total = ae + scale(div, weights.diversity)
                _check_finite(total.item(), batch, "stage 1")
                backward(total)
            optimizer.step(lr)
            b = len(batch)
            sum_ae += ae.item() * b
            sum_div += div.item() * b
            sum_total += total.item() * b
        rows.append({"epoch": epoch, "loss_ae": sum_ae / n, "loss_diversity": sum_div / n,
                     "loss_total": sum_total / n, "lr": lr})
    return rows


def train_stage2(anet, fnet, samples, cfg, space):
    """Freeze AttentionNet and train FusionNet on recomputed ranked patches."""
    if not samples:
        raise EmptyInput("train_stage2: no samples")
    rng = seed_streams(cfg.seed)["stage2"]
    set_requires_grad(anet, False)
    optimizer = SGD(fnet.named_parameters(), momentum=cfg.momentum)
    rows = []
    n = len(samples)
    for epoch in range(cfg.epochs_stage2):
        lr = lr_at(epoch, cfg)
        sum_ae = 0.0
        for batch_idx in _batches(n, cfg.batch_size, rng):
            batch = [samples[i] for i in batch_idx]
            if cfg.augment:
                batch = [augment(s, cfg.augment_pad, rng) for s in batch]
            # patches come from the frozen net, outside any tape
            patch_sets = []
            for s in batch:
                _, att = anet.forward(s.image)
                patch_sets.append(extract_patches(s.image, att, cfg.crop))
            with GradTape():
                preds, dists = [], []
                for s, ps in zip(batch, patch_sets):
                    logits = fnet.forward(s.image, ps)
                    probs = normalize_output(logits)
                    dists.append(probs)
                    preds.append(reshape(expected_age(probs, space), (1,)))
                gts = Tensor(np.array([s.label for s in batch], dtype=np.float64))
                ae = age_estimation_loss(concat(preds), gts, dists, space,
                                         cfg.mae_weight, cfg.kl_weight)
                _check_finite(ae.item(), batch, "stage 2")
                backward(ae)
            optimizer.step(lr)
            sum_ae += ae.item() * len(batch)
        rows.append({"epoch": epoch, "loss_ae": sum_ae / n, "loss_diversity": 0.0,
                     "loss_total": sum_ae / n, "lr": lr})
    return rows


def predict(anet, fnet, image, space, crop_cfg):
    """Expected label for one image through the full two-network pipeline."""
    _, att = anet.forward(image)
    patch_set = extract_patches(image, att, crop_cfg)
    logits = fnet.forward(image, patch_set)
    return expected_age(normalize_output(logits), space).item()


def evaluate(anet, fnet, samples, space, crop_cfg):
    """Predictions and ground truths over a sample list."""
    if not samples:
        raise EmptyInput("evaluate: no samples")
    preds, gts = [], []
    for s in samples:
        preds.append(predict(anet, fnet, s.image, space, crop_cfg))
        gts.append(float(s.label))
    return preds, gts


def metric_mae(preds, gts):
    if len(preds) == 0 or len(preds) != len(gts):
        raise EmptyInput(f"metric_mae: {len(preds)} predictions vs {len(gts)} truths")
    return float(np.mean(np.abs(np.asarray(preds) - np.asarray(gts))))


def metric_cs(preds, gts, margin):
    """Percentage of predictions within +-margin of the truth."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise EmptyInput(f"metric_cs: {len(preds)} predictions vs {len(gts)} truths")
    err = np.abs(np.asarray(preds) - np.asarray(gts))
    return float(100.0 * np.count_nonzero(err <= margin) / len(preds))


def mean_normalized_overlap(anet, samples):
    """Mean pairwise map product mass over samples, normalized by the mean
    per-map self product mass over the same samples.

    The aggregate ratio is used (mean of pair masses / mean of self masses)
    rather than a mean of per-sample ratios: the per-sample ratio is dominated
    by samples whose maps are uniformly tiny, where it says nothing about how
    the mass is arranged.  Computed on the positive responses, matching both
    the training penalty and what the crop pipeline actually consumes.
    """
    if not samples:
        raise EmptyInput("mean_normalized_overlap: no samples")
    pair_total = 0.0
    self_total = 0.0
    for s in samples:
        _, att = anet.forward(s.image)
        if len(att.raw_maps) < 2:
            raise TooFewMaps("overlap needs at least two maps")
        maps = [max0(m) for m in att.raw_maps]
        pair_total += diversity_loss(maps).item()
        self_total += sum(tsum(mul(m, m)).item() for m in maps)
    return pair_total / self_total if self_total > 0 else 0.0


def write_loss_csv(path, rows):
    lines = ["epoch,loss_ae,loss_diversity,loss_total,lr"]
    for row in rows:
        lines.append(f"{row['epoch']},{row['loss_ae']!r},{row['loss_diversity']!r},"
                     f"{row['loss_total']!r},{row['lr']!r}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
