"""Command line entry points: gen, train, eval, export.

Exit codes: 0 success, 1 usage error, 2 unreadable or inconsistent
data/config, 3 numerical failure (non-finite loss or a degenerate attention
map). The ADPF_SEED environment variable, when set, overrides the seed from
any config or spec file. Every command is deterministic given its inputs;
re-running writes identical checkpoint, CSV, and image bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig, config_hash, load_config_values, synth_spec_from_values
from .data import generate_synth, load_dataset, load_image_pgm, save_image_pgm, write_dataset
from .errors import (AdpfError, AllNonPositive, ConfigError, DegenerateMap, DomainError,
                     EmptyInput, FormatError, IoError, MissingCheckpoint, NotADistribution,
                     NumericalFailure, OutOfRange, ShapeMismatch, SpecInvalid)
from .layers import resize_bilinear_array
from .losses import AgeLabelSpace
from .models import AttentionNet, FusionNet, load_state
from .patches import extract_patches
from .training import (evaluate, metric_cs, metric_mae, seed_streams, train_stage1,
                       train_stage2, write_loss_csv)

ATTENTION_CKPT = "attention_net.ckpt"
FUSION_CKPT = "fusion_net.ckpt"
RUN_MANIFEST = "manifest.json"

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3

_DATA_ERRORS = (ConfigError, FormatError, SpecInvalid, IoError, MissingCheckpoint,
                EmptyInput, OutOfRange, ShapeMismatch)
_NUMERIC_ERRORS = (NumericalFailure, DegenerateMap, AllNonPositive, NotADistribution,
                   DomainError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_env_seed(seed):
    raw = os.environ.get("ADPF_SEED")
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"ADPF_SEED must be an integer, got {raw!r}") from exc


def _build_parser():
    parser = _Parser(prog="adpf", description="ranked-attention patch fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--spec", required=True, help="synth spec file (key = value)")
    gen.add_argument("--count", required=True, type=int, help="number of samples")
    gen.add_argument("--out", required=True, help="output dataset directory")

    train = sub.add_parser("train", help="run one or both training stages")
    train.add_argument("--config", required=True, help="train config file")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--out", required=True, help="output directory for checkpoints")
    train.add_argument("--stage", choices=("1", "2", "both"), default="both")

    ev = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    ev.add_argument("--checkpoints", required=True, help="directory written by train")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--cs-margins", default="0,1,2,3,4,5",
                    help="comma-separated integer margins for the score curve")
    ev.add_argument("--out", default=None, help="output directory (default: checkpoints)")

    ex = sub.add_parser("export", help="write ranked attention maps and patches")
    ex.add_argument("--checkpoints", required=True, help="directory written by train")
    ex.add_argument("--image", required=True, help="input PGM image")
    ex.add_argument("--out", required=True, help="output directory")
    return parser


def _load_run_config(checkpoints_dir):
    path = os.path.join(checkpoints_dir, RUN_MANIFEST)
    if not os.path.exists(path):
        raise MissingCheckpoint(f"no run manifest at {path}")
    try:
        with open(path, "r") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read run manifest {path}: {exc}") from exc
    if "config_text" not in manifest:
        raise FormatError(f"{path}: missing config_text")
    from .config import parse_config_text
    return TrainConfig.from_values(parse_config_text(manifest["config_text"]))


def _build_nets(cfg):
    streams = seed_streams(cfg.seed)
    space = AgeLabelSpace.from_range(cfg.age_min, cfg.age_max, cfg.sigma)
    anet = AttentionNet(cfg, space.size, streams["attention_init"])
    fnet = FusionNet(cfg, space.size, streams["fusion_init"])
    return anet, fnet, space


def cmd_gen(args):
    values = load_config_values(args.spec)
    spec = synth_spec_from_values(values)
    spec.seed = _apply_env_seed(spec.seed)
    samples = generate_synth(spec, args.count)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = TrainConfig.from_file(args.config)
    cfg.seed = _apply_env_seed(cfg.seed)
    samples = load_dataset(args.data)
    bad = [s.id for s in samples if not cfg.age_min <= s.label <= cfg.age_max]
    if bad:
        raise ConfigError(f"labels outside [{cfg.age_min}, {cfg.age_max}] "
                          f"for samples {bad[:5]}")
    anet, fnet, space = _build_nets(cfg)
    os.makedirs(args.out, exist_ok=True)
    attention_path = os.path.join(args.out, ATTENTION_CKPT)
    fusion_path = os.path.join(args.out, FUSION_CKPT)
    written = {}
    if args.stage in ("1", "both"):
        rows = train_stage1(anet, samples, cfg, space)
        ckpt.save_checkpoint(attention_path, anet.named_parameters())
        write_loss_csv(os.path.join(args.out, "loss_stage1.csv"), rows)
        written["attention_net"] = ATTENTION_CKPT
        final = f", final loss {rows[-1]['loss_total']:.6f}" if rows else ""
        print(f"stage 1 done: {len(rows)} epochs{final}")
    if args.stage in ("2", "both"):
        if args.stage == "2":
            if not os.path.exists(attention_path):
                raise MissingCheckpoint(f"stage 2 requires {attention_path}")
            load_state(anet, ckpt.load_checkpoint(attention_path))
        rows = train_stage2(anet, fnet, samples, cfg, space)
        ckpt.save_checkpoint(fusion_path, fnet.named_parameters())
        write_loss_csv(os.path.join(args.out, "loss_stage2.csv"), rows)
        written["fusion_net"] = FUSION_CKPT
        final = f", final loss {rows[-1]['loss_total']:.6f}" if rows else ""
        print(f"stage 2 done: {len(rows)} epochs{final}")
    config_text = cfg.to_text()
    manifest = {
        "config_text": config_text,
        "config_hash": config_hash(config_text),
        "seed": cfg.seed,
        "checkpoints": written,
        "created_unix": int(time.time()),
    }
    with open(os.path.join(args.out, RUN_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _parse_margins(text):
    try:
        margins = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad cs margins {text!r}") from exc
    if not margins or any(m < 0 for m in margins):
        raise ConfigError(f"cs margins must be non-negative integers, got {text!r}")
    return margins


def cmd_eval(args):
    cfg = _load_run_config(args.checkpoints)
    cfg.seed = _apply_env_seed(cfg.seed)
    anet, fnet, space = _build_nets(cfg)
    for name, net in ((ATTENTION_CKPT, anet), (FUSION_CKPT, fnet)):
        path = os.path.join(args.checkpoints, name)
        if not os.path.exists(path):
            raise MissingCheckpoint(f"missing {path}")
        load_state(net, ckpt.load_checkpoint(path))
    samples = load_dataset(args.data)
    preds, gts = evaluate(anet, fnet, samples, space, cfg.crop)
    mae = metric_mae(preds, gts)
    margins = _parse_margins(args.cs_margins)
    out_dir = args.out if args.out is not None else args.checkpoints
    os.makedirs(out_dir, exist_ok=True)
    lines = ["v,cs_percent"]
    print(f"MAE {mae!r}")
    for v in margins:
        cs = metric_cs(preds, gts, v)
        print(f"CS({v}) {cs!r}")
        lines.append(f"{v},{cs!r}")
    with open(os.path.join(out_dir, "cs.csv"), "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def _export_map(path, map_2d):
    lo, hi = float(map_2d.min()), float(map_2d.max())
    normalized = (map_2d - lo) / (hi - lo) if hi > lo else np.zeros_like(map_2d)
    save_image_pgm(path, normalized)


def cmd_export(args):
    cfg = _load_run_config(args.checkpoints)
    anet, _, _ = _build_nets(cfg)
    path = os.path.join(args.checkpoints, ATTENTION_CKPT)
    if not os.path.exists(path):
        raise MissingCheckpoint(f"missing {path}")
    load_state(anet, ckpt.load_checkpoint(path))
    image = load_image_pgm(args.image)
    os.makedirs(args.out, exist_ok=True)
    _, att = anet.forward(image)
    size = cfg.input_size
    for rank_pos, head_idx in enumerate(att.order, start=1):
        upsampled, _ = resize_bilinear_array(att.maps[head_idx].data, size, size)
        _export_map(os.path.join(args.out, f"map_rank{rank_pos}.pgm"), upsampled[0])
    failures = []
    try:
        patch_set = extract_patches(image, att, cfg.crop)
    except DegenerateMap as exc:
        failures.append(str(exc))
        patch_set = None
    if patch_set is not None:
        for rank_pos, patch in enumerate(patch_set.patches, start=1):
            save_image_pgm(os.path.join(args.out, f"patch_rank{rank_pos}.pgm"),
                           patch.data.mean(axis=0))
    if failures:
        for failure in failures:
            print(f"degenerate map: {failure}", file=sys.stderr)
        return _NUMERIC_EXIT
    print(f"exported {len(att.order)} maps and patches to {args.out}")
    return 0


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    try:
        return _COMMANDS[args.command](args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT


def entry():
    sys.exit(main())
