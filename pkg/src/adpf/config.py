"""Plain-text run configuration.

Config files are `key = value` lines; `#` starts a comment and blank lines
are ignored. Nested groups use dotted keys (crop.patch_size = 16).
Serialization is canonical, so parse -> serialize -> parse is the identity
and the SHA-256 of the canonical text identifies a configuration exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .patches import CropConfig


def parse_config_text(text):
    """Raw key -> string-value mapping; duplicate keys keep the last value."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        values[key] = value
    return values


def load_config_values(path):
    try:
        with open(path, "r") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _parse_bool(key, text):
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key, text, kind):
    try:
        if kind is bool:
            return _parse_bool(key, text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from exc


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainConfig:
    """Every knob of the two-stage pipeline; defaults follow the reference recipe.

    backbone_channels = 0 means "derive as heads * head_channels", which keeps
    any head count valid; an explicit value must be divisible by heads.
    """

    seed: int = 0
    heads: int = 5
    head_channels: int = 8
    backbone_channels: int = 0
    backbone_hidden: int = 20
    bottleneck_ratio: int = 4
    input_size: int = 32
    input_channels: int = 1
    age_min: int = 16
    age_max: int = 77
    sigma: float = 2.0
    lambda_: float = 0.01
    mae_weight: float = 1.0
    kl_weight: float = 1.0
    batch_size: int = 32
    epochs_stage1: int = 200
    epochs_stage2: int = 200
    lr_initial: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    momentum: float = 0.0
    augment: bool = True
    augment_pad: int = 8
    fusion_main_width: int = 8
    fusion_stem_width: int = 4
    fusion_stem_blocks: int = 2
    crop: CropConfig = field(default_factory=lambda: CropConfig(patch_size=16))

    # config-file key for each scalar field ("lambda" is a Python keyword)
    _KEYS = {
        "seed": ("seed", int),
        "heads": ("heads", int),
        "head_channels": ("head_channels", int),
        "backbone_channels": ("backbone_channels", int),
        "backbone_hidden": ("backbone_hidden", int),
        "bottleneck_ratio": ("bottleneck_ratio", int),
        "input_size": ("input_size", int),
        "input_channels": ("input_channels", int),
        "age_min": ("age_min", int),
        "age_max": ("age_max", int),
        "sigma": ("sigma", float),
        "lambda": ("lambda_", float),
        "mae_weight": ("mae_weight", float),
        "kl_weight": ("kl_weight", float),
        "batch_size": ("batch_size", int),
        "epochs_stage1": ("epochs_stage1", int),
        "epochs_stage2": ("epochs_stage2", int),
        "lr_initial": ("lr_initial", float),
        "lr_decay_factor": ("lr_decay_factor", float),
        "lr_decay_every": ("lr_decay_every", int),
        "momentum": ("momentum", float),
        "augment": ("augment", bool),
        "augment_pad": ("augment_pad", int),
        "fusion_main_width": ("fusion_main_width", int),
        "fusion_stem_width": ("fusion_stem_width", int),
        "fusion_stem_blocks": ("fusion_stem_blocks", int),
        "crop.threshold_frac": ("crop.threshold_frac", float),
        "crop.min_box": ("crop.min_box", int),
        "crop.patch_size": ("crop.patch_size", int),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.seed >= 0, "seed must be >= 0"),
            (self.heads >= 0, "heads must be >= 0"),
            (self.head_channels >= 2 and self.head_channels % 2 == 0,
             "head_channels must be even and >= 2"),
            (self.backbone_channels >= 0, "backbone_channels must be >= 0 (0 = derived)"),
            (self.backbone_hidden >= 1, "backbone_hidden must be >= 1"),
            (self.bottleneck_ratio >= 1, "bottleneck_ratio must be >= 1"),
            (self.input_size >= 4 and self.input_size % 4 == 0,
             "input_size must be a positive multiple of 4"),
            (self.input_channels >= 1, "input_channels must be >= 1"),
            (self.age_max > self.age_min, "age range must be non-empty"),
            (self.sigma > 0, "sigma must be positive"),
            (self.lambda_ >= 0, "lambda must be >= 0"),
            (self.mae_weight >= 0, "mae_weight must be >= 0"),
            (self.kl_weight >= 0, "kl_weight must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs_stage1 >= 0, "epochs_stage1 must be >= 0"),
            (self.epochs_stage2 >= 0, "epochs_stage2 must be >= 0"),
            (self.lr_initial >= 0, "lr_initial must be >= 0"),
            (0 < self.lr_decay_factor <= 1, "lr_decay_factor must lie in (0, 1]"),
            (self.lr_decay_every >= 1, "lr_decay_every must be >= 1"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.augment_pad >= 0, "augment_pad must be >= 0"),
            (self.fusion_main_width >= 1, "fusion_main_width must be >= 1"),
            (self.fusion_stem_width >= 1, "fusion_stem_width must be >= 1"),
            (self.fusion_stem_blocks >= 1, "fusion_stem_blocks must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def resolved_backbone_channels(self):
        if self.backbone_channels > 0:
            return self.backbone_channels
        return max(self.heads, 1) * self.head_channels

    @classmethod
    def from_values(cls, values):
        kwargs = {}
        crop_kwargs = {}
        for key, text in values.items():
            if key not in cls._KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            name, kind = cls._KEYS[key]
            parsed = _coerce(key, text, kind)
            if name.startswith("crop."):
                crop_kwargs[name.split(".", 1)[1]] = parsed
            else:
                kwargs[name] = parsed
        base_crop = dataclasses.asdict(CropConfig(patch_size=16))
        base_crop.update(crop_kwargs)
        return cls(crop=CropConfig(**base_crop), **kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_values(load_config_values(path))

    def to_text(self):
        lines = []
        for key, (name, _) in self._KEYS.items():
            if name.startswith("crop."):
                value = getattr(self.crop, name.split(".", 1)[1])
            else:
                value = getattr(self, name)
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def full_scale_config():
    """Full-scale preset: 128x128 inputs, 500 backbone channels over 5 heads."""
    return TrainConfig(
        heads=5,
        head_channels=100,
        backbone_hidden=250,
        bottleneck_ratio=5,
        input_size=128,
        crop=CropConfig(threshold_frac=0.5, min_box=16, patch_size=64),
    )


def desk_config(**overrides):
    """Desk-scale preset tuned to train the full two-stage pipeline on one CPU
    core in minutes while keeping every attention map croppable throughout.

    Momentum plus the reduced distribution-match weight make 30-epoch stages
    converge; the learning rate is the largest that neither overflows nor
    drives value rows to the projection boundary.
    """
    values = dict(
        epochs_stage1=30,
        epochs_stage2=30,
        lr_initial=0.01,
        lr_decay_every=12,
        momentum=0.9,
        kl_weight=0.25,
        augment=False,
    )
    values.update(overrides)
    return TrainConfig(**values)


def synth_spec_from_values(values):
    """Build a SynthSpec from parsed config values (used by the gen command)."""
    from .data import SynthSpec
    kinds = {
        "image_size": int, "age_min": int, "age_max": int, "evidence_box_size": int,
        "noise_level": float, "placement": str, "jitter_margin": int, "seed": int,
    }
    kwargs = {}
    for key, text in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown synth key {key!r}")
        kwargs[key] = _coerce(key, text, kinds[key])
    return SynthSpec(**kwargs)
