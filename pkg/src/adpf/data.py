"""Synthetic localized-evidence datasets and on-disk image handling.

A sample is a grayscale image whose label is recoverable only from one square
region: background pixels are uniform noise, and the evidence square is filled
with (label - age_min) / (age_max - age_min). Placement is either centered
(fixed) or jittered around the center. Images round-trip through binary PGM
(P5) files, and a dataset directory is a manifest.csv plus one PGM per sample.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, FormatError, IoError, SpecInvalid
from .tensor import Tensor


@dataclass
class Sample:
    image: Tensor  # (1, H, W), values in [0, 1]
    label: int
    id: str


@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset; identical specs generate identical bytes."""

    image_size: int = 32
    age_min: int = 16
    age_max: int = 77
    evidence_box_size: int = 8
    noise_level: float = 0.1
    placement: str = "jittered"
    jitter_margin: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 2:
            raise SpecInvalid(f"image_size must be >= 2, got {self.image_size}")
        if self.age_max <= self.age_min:
            raise SpecInvalid(f"age range [{self.age_min}, {self.age_max}] is empty")
        if not 1 <= self.evidence_box_size <= self.image_size:
            raise SpecInvalid(f"evidence box {self.evidence_box_size} does not fit "
                              f"image {self.image_size}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise SpecInvalid(f"noise_level must lie in [0, 1], got {self.noise_level}")
        if self.placement not in ("fixed", "jittered"):
            raise SpecInvalid(f"placement must be fixed or jittered, got {self.placement!r}")
        if self.jitter_margin < 0:
            raise SpecInvalid(f"jitter_margin must be >= 0, got {self.jitter_margin}")

    def fixed_evidence_box(self):
        """(top, left, size) of the centered evidence square."""
        top = (self.image_size - self.evidence_box_size) // 2
        return top, top, self.evidence_box_size


def generate_synth(spec, count):
    """Deterministic list of samples; labels drawn uniformly over the age range."""
    if count < 1:
        raise EmptyInput(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(spec.seed)
    size, box = spec.image_size, spec.evidence_box_size
    base_top, base_left, _ = spec.fixed_evidence_box()
    samples = []
    for i in range(count):
        label = int(rng.integers(spec.age_min, spec.age_max + 1))
        value = (label - spec.age_min) / (spec.age_max - spec.age_min)
        if spec.noise_level > 0:
            img = rng.uniform(0.0, spec.noise_level, size=(size, size))
        else:
            img = np.zeros((size, size))
        if spec.placement == "jittered":
            top = base_top + int(rng.integers(-spec.jitter_margin, spec.jitter_margin + 1))
            left = base_left + int(rng.integers(-spec.jitter_margin, spec.jitter_margin + 1))
            top = min(max(top, 0), size - box)
            left = min(max(left, 0), size - box)
        else:
            top, left = base_top, base_left
        img[top:top + box, left:left + box] = value
        samples.append(Sample(image=Tensor(img[None]), label=label, id=f"synth_{i:05d}"))
    return samples


def partition(samples, train_frac, seed):
    """Shuffled disjoint train/test split covering every sample exactly once."""
    if not samples:
        raise EmptyInput("partition: no samples")
    if not 0.0 < train_frac < 1.0:
        raise SpecInvalid(f"train_frac must lie in (0, 1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_frac * len(samples)))
    n_train = min(max(n_train, 1), len(samples) - 1)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def augment(sample, pad, rng):
    """Zero-pad, crop back at a random offset, and flip horizontally with p=0.5."""
    arr = sample.image.data
    if pad > 0:
        _, h, w = arr.shape
        padded = np.pad(arr, ((0, 0), (pad, pad), (pad, pad)))
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        arr = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < 0.5:
        arr = arr[:, :, ::-1]
    return Sample(image=Tensor(np.ascontiguousarray(arr)), label=sample.label, id=sample.id)


def save_image_pgm(path, arr_2d):
    """Write a [0, 1] float image as an 8-bit binary PGM (P5, maxval 255)."""
    arr = np.asarray(arr_2d, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"save_image_pgm: expected 2-d image, got {arr.shape}")
    levels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(levels.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _next_token(fh):
    # PNM tokens are separated by whitespace; '#' starts a comment to end of line
    tok = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            if tok:
                return tok
            raise FormatError("unexpected end of PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def load_image_pgm(path):
    """Read a binary PGM into a (1, H, W) tensor with values in [0, 1]."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        if _next_token(fh) != b"P5":
            raise FormatError(f"{path}: not a binary PGM (P5)")
        try:
            w = int(_next_token(fh))
            h = int(_next_token(fh))
            maxval = int(_next_token(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PGM header") from exc
        if maxval != 255:
            raise FormatError(f"{path}: maxval must be 255, got {maxval}")
        if w < 1 or h < 1:
            raise FormatError(f"{path}: bad dimensions {w}x{h}")
        payload = fh.read(w * h)
        if len(payload) != w * h:
            raise FormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
    return Tensor(arr[None])


def write_dataset(directory, samples):
    """Write PGMs plus manifest.csv (columns id, path, label) into a directory."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for s in samples:
        filename = f"{s.id}.pgm"
        save_image_pgm(os.path.join(directory, filename), s.image.data[0])
        rows.append((s.id, filename, s.label))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "path", "label"])
    writer.writerows(rows)
    try:
        with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc


def load_dataset(directory):
    """Read back a dataset directory written by write_dataset."""
    manifest = os.path.join(directory, "manifest.csv")
    try:
        with open(manifest, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "path", "label"]:
                raise FormatError(f"{manifest}: expected header id,path,label, got {header}")
            rows = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read manifest: {exc}") from exc
    samples = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise FormatError(f"{manifest}:{line_no}: expected 3 columns, got {len(row)}")
        sid, rel_path, label_text = row
        try:
            label = int(label_text)
        except ValueError as exc:
            raise FormatError(f"{manifest}:{line_no}: bad label {label_text!r}") from exc
        image = load_image_pgm(os.path.join(directory, rel_path))
        samples.append(Sample(image=image, label=label, id=sid))
    if not samples:
        raise EmptyInput(f"{manifest}: no samples listed")
    return samples
