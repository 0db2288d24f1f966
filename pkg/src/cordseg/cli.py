"""Command-line interface.

Commands: phantom, train, segment, eval, consensus. A JSON config file can
set any PhantomConfig / TrainConfig / PatchConfig / CurveOptConfig /
LesionMatchConfig field under its section name; CLI flags override file
values; unknown keys are rejected.

Exit codes: 0 ok, 2 invalid config/arguments, 3 I/O or file-format error,
4 missing data (e.g. lesion masks), 5 no cord found.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .centerline import Centerline, CurveOptConfig, centerline_from_mask
from .dataset import DatasetIndex
from .errors import ConfigError, CordSegError, FormatError, MissingDataError, NoCordFoundError
from .metrics import (
    MetricsReport,
    LesionMatchConfig,
    centerline_mse,
    dice,
    lesionwise_pr,
    localization_rate,
    majority_vote,
    relative_volume_difference,
    voxelwise_pr,
)
from .phantom import PhantomConfig, generate_dataset
from .pipeline import (
    TrainConfig,
    TrainedBundle,
    segment,
    to_working,
    train_centerline_model,
    train_seg_model,
)
from .preprocess import PatchConfig
from .volume import read_mask, read_volume, write_volume
from . import pipeline

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_NO_CORD = 5

_CONFIG_SECTIONS = {
    "phantom": PhantomConfig,
    "train": TrainConfig,
    "patch": PatchConfig,
    "curve": CurveOptConfig,
    "lesion_match": LesionMatchConfig,
    "augment": AugmentConfig,
}


def _build_dataclass(cls, data: dict, **overrides):
    """Instantiate a config dataclass, rejecting unknown keys and turning
    JSON lists into tuples."""
    known = {f.name for f in dataclasses.fields(cls)}
    merged = dict(data)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    cleaned = {k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()}
    return cls(**cleaned)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    unknown = set(data) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def _cmd_phantom(args) -> int:
    config = _load_config(args.config)
    cfg = _build_dataclass(PhantomConfig, config.get("phantom", {}), contrast=args.contrast)
    generate_dataset(args.n, cfg, args.out, seed=args.seed,
                     lesion_free_fraction=args.lesion_free_fraction)
    log.info("wrote %d phantoms to %s", args.n, args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    section = dict(config.get("train", {}))
    if "augment" in config:
        section["augment"] = _build_dataclass(AugmentConfig, config["augment"])
    if "patch" in config:
        section["patch"] = _build_dataclass(PatchConfig, config["patch"])
    cfg = _build_dataclass(
        TrainConfig, section,
        stage=args.stage, contrast=args.contrast, seed=args.seed,
        epochs=args.epochs, base_channels=args.base_channels,
    )
    index = DatasetIndex.load(args.index)
    if cfg.stage == "centerline":
        comp, rows = train_centerline_model(index, cfg)
    else:
        comp, rows = train_seg_model(index, cfg, cfg.stage)

    out_dir = Path(args.out)
    if (out_dir / "manifest.json").exists():
        bundle = TrainedBundle.load(out_dir)
        bundle.check_contrast(cfg.contrast)
    else:
        curve = _build_dataclass(CurveOptConfig, config.get("curve", {}))
        bundle = TrainedBundle(contrast=cfg.contrast, patch_cfg=cfg.patch, curve_cfg=curve,
                               working_spacing=cfg.working_spacing)
    bundle.components[cfg.stage] = comp
    bundle.save(out_dir)
    log_path = out_dir / f"{cfg.stage}_log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in rows:
            fh.write(f"{row['epoch']},{row['train_loss']:.6f},{row['val_loss']:.6f}\n")
    log.info("trained %s stage into %s (%d epochs logged)", cfg.stage, out_dir, len(rows))
    return EXIT_OK


def _cmd_segment(args) -> int:
    bundle = TrainedBundle.load(args.bundle)
    vol = read_volume(args.input)
    if args.centerline_out and args.target is None:
        cline = pipeline.detect_centerline(vol, bundle, args.contrast)
        cline.save_csv(args.centerline_out)
        return EXIT_OK
    result = segment(vol, bundle, args.target, args.contrast, return_probability=True)
    mask, prob = result
    write_volume(mask, args.out)
    if args.prob:
        write_volume(prob, args.prob)
    if args.centerline_out:
        cline = pipeline.detect_centerline(vol, bundle, args.contrast)
        cline.save_csv(args.centerline_out)
    log.info("wrote %s mask to %s", args.target, args.out)
    return EXIT_OK


def _eval_pair_cord(report, vid, pred_path, ref_path):
    auto = read_mask(pred_path)
    manual = read_mask(ref_path)
    report.add(vid, "dice", dice(auto, manual), "%")
    if manual.data.any():
        report.add(vid, "relative_volume_difference",
                   relative_volume_difference(auto, manual), "%")


def _eval_pair_lesion(report, vid, pred_path, ref_path, match_cfg):
    auto = read_mask(pred_path)
    manual = read_mask(ref_path)
    report.add(vid, "dice", dice(auto, manual), "%")
    if manual.data.any():
        report.add(vid, "relative_volume_difference",
                   relative_volume_difference(auto, manual), "%")
    sens, prec = voxelwise_pr(auto, manual)
    report.add(vid, "voxelwise_sensitivity", sens, "%")
    report.add(vid, "voxelwise_precision", prec, "%")
    counts = lesionwise_pr(auto, manual, match_cfg)
    report.add(vid, "lesionwise_sensitivity", counts.sensitivity, "%")
    report.add(vid, "lesionwise_precision", counts.precision, "%")


def _eval_pair_centerline(report, vid, pred_path, ref_path):
    manual = to_working(read_mask(ref_path), interp="nearest")
    ref = centerline_from_mask(manual)
    pred = Centerline.load_csv(pred_path, spacing=manual.spacing)
    report.add(vid, "centerline_mse", centerline_mse(pred, ref), "mm")
    report.add(vid, "localization_rate", localization_rate(pred, manual), "%")


def _cmd_eval(args) -> int:
    if len(args.pred) != len(args.ref):
        raise ConfigError("--pred and --ref must be given the same number of times")
    config = _load_config(args.config)
    match_cfg = _build_dataclass(LesionMatchConfig, config.get("lesion_match", {}))
    report = MetricsReport()
    for i, (pred, ref) in enumerate(zip(args.pred, args.ref)):
        vid = f"vol-{i:03d}"
        if args.mode == "cord":
            _eval_pair_cord(report, vid, pred, ref)
        elif args.mode == "lesion":
            _eval_pair_lesion(report, vid, pred, ref, match_cfg)
        else:
            _eval_pair_centerline(report, vid, pred, ref)
    report.to_json(str(args.out) + ".json")
    report.to_csv(str(args.out) + ".csv")
    log.info("wrote %s.json and %s.csv", args.out, args.out)
    return EXIT_OK


def _cmd_consensus(args) -> int:
    masks = [read_mask(p) for p in args.masks]
    voted = majority_vote(masks)
    write_volume(voted, args.out)
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cordseg",
        description="Two-stage spinal cord / lesion segmentation toolkit",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of subjects (>= 3)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--contrast", choices=("t1", "t2", "t2s"), default=None,
                   help="contrast preset (default t2)")
    p.add_argument("--lesion-free-fraction", type=float, default=0.0,
                   help="fraction of subjects generated without lesions (default 0)")
    p.add_argument("--config", help="JSON config file (phantom section)")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("--stage", required=True, choices=("centerline", "cord", "lesion"))
    p.add_argument("--index", required=True, help="dataset index JSON")
    p.add_argument("--contrast", choices=("t1", "t2", "t2s"), default=None,
                   help="contrast tag (default t2)")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    p.add_argument("--epochs", type=int, default=None,
                   help="epochs (defaults: centerline 100, cord/lesion 300)")
    p.add_argument("--base-channels", type=int, default=None,
                   help="U-net base channel width (default 32)")
    p.add_argument("--config", help="JSON config file (train/augment/patch/curve sections)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("segment", help="segment a volume with a trained bundle")
    p.add_argument("--in", dest="input", required=True, help="input NIfTI volume")
    p.add_argument("--bundle", required=True, help="trained bundle directory")
    p.add_argument("--target", choices=("cord", "lesion"), default=None)
    p.add_argument("--contrast", choices=("t1", "t2", "t2s"), default=None,
                   help="declared contrast; must match the bundle")
    p.add_argument("--out", help="output mask path (.nii/.nii.gz)")
    p.add_argument("--prob", help="also write the working-space probability volume here")
    p.add_argument("--centerline-out", help="write the detected centerline CSV here")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("eval", help="compute evaluation metrics for mask/centerline pairs")
    p.add_argument("--pred", action="append", required=True,
                   help="predicted mask (or centerline CSV in centerline mode); repeatable")
    p.add_argument("--ref", action="append", required=True,
                   help="reference mask; repeatable, paired with --pred in order")
    p.add_argument("--mode", required=True, choices=("centerline", "cord", "lesion"))
    p.add_argument("--out", required=True, help="output report prefix (.json/.csv added)")
    p.add_argument("--config", help="JSON config file (lesion_match section)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("consensus", help="majority-vote consensus of rater masks")
    p.add_argument("--masks", nargs="+", required=True, help="two or more rater masks")
    p.add_argument("--out", required=True, help="output consensus mask path")
    p.set_defaults(func=_cmd_consensus)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.func is _cmd_segment and args.target is not None and not args.out:
            raise ConfigError("--out is required when --target is given")
        if args.func is _cmd_segment and args.target is None and not args.centerline_out:
            raise ConfigError("segment needs --target (and --out) or --centerline-out")
        return args.func(args)
    except NoCordFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CORD
    except MissingDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CordSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
