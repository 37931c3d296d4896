"""Command-line entry point.

Subcommands: ``preprocess``, ``train``, ``evaluate``, ``predict``,
``inspect``, ``synth``.  Exit codes: 0 success, 2 usage/configuration/input
error, 1 runtime failure.  Diagnostics go to stderr; requested results go
to stdout or to files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, load_config, save_config
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_case_files,
    load_checkpoint,
    load_image,
    save_checkpoint,
    save_image_u8,
    save_mask,
    scan_dataset,
    write_dataset,
)
from .errors import CheckpointError, ConfigurationError, CunetsError, InputError
from .metrics import (
    DEFAULT_THRESHOLD_RULES,
    parse_threshold_rules,
    write_scores_csv,
    write_summary_json,
)
from .models import VARIANTS, build_model, canonical_variant, count_params, summarize
from .preprocessing import (
    CasePair,
    normalize,
    pad_to_square,
    preprocess_case,
    resize_bilinear,
)
from .schedule import FilterSchedule
from .training import evaluate, split_dataset, train


def _err(msg: str) -> None:
    print(f"cunets: {msg}", file=sys.stderr)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("variant", "input_size", "learning_rate", "batch_size", "max_epochs",
                "val_fraction", "seed", "profile", "border_fraction", "clip_limit",
                "tiles", "target_size", "threshold"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return apply_overrides(cfg, overrides)


def load_preprocessed_cases(root, split: str | None = None) -> list[CasePair]:
    """Read back a preprocessed (or synthetic) dataset from disk."""
    manifest = scan_dataset(root)
    tags = {e.split_tag for e in manifest.entries}
    if split is not None:
        entries = manifest.split(split)
        if not entries and split in ("train", "test"):
            raise InputError(f"{root}: no cases with split tag {split!r} (found {sorted(tags)})")
    else:
        entries = manifest.entries
    cases = []
    for entry in entries:
        img, masks = load_case_files(entry)
        image = normalize(img)
        mask = masks[0]
        for extra in masks[1:]:
            mask = np.logical_or(mask, extra).astype(np.uint8)
        if image.shape[0] != image.shape[1]:
            raise InputError(f"{entry.source_id}: preprocessed case is not square: {image.shape}")
        cases.append(CasePair(image=image, mask=mask, source_id=entry.source_id,
                              applied_steps=[{"step": "loaded", "path": entry.image_path}]))
    return cases


# ------------------------------------------------------------- subcommands


def cmd_preprocess(args) -> int:
    cfg = _load_run_config(args)
    manifest = scan_dataset(args.in_root, profile=cfg.profile)
    out_root = Path(args.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    lines = []
    counts: dict[str, int] = {}
    for entry in manifest.entries:
        img, masks = load_case_files(entry)
        pair = preprocess_case(
            img, masks,
            profile=cfg.profile,
            target_size=cfg.target_size,
            source_id=entry.source_id,
            border_fraction=cfg.border_fraction,
            clip_limit=cfg.clip_limit,
            tiles=(cfg.tiles, cfg.tiles),
        )
        split = entry.split_tag if entry.split_tag != "unsplit" else None
        stem = pair.source_id.replace("/", "_")
        base = out_root / split if split else out_root
        (base / "images").mkdir(parents=True, exist_ok=True)
        (base / "masks").mkdir(parents=True, exist_ok=True)
        image_path = base / "images" / f"{stem}.png"
        mask_path = base / "masks" / f"{stem}_mask.png"
        save_image_u8(image_path, pair.image)
        save_mask(mask_path, pair.mask)
        counts[entry.split_tag] = counts.get(entry.split_tag, 0) + 1
        lines.append(json.dumps({
            "source_id": pair.source_id,
            "image_path": str(image_path),
            "mask_path": str(mask_path),
            "applied_steps": pair.applied_steps,
        }))
    (out_root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    for tag in sorted(counts):
        print(f"{tag}: {counts[tag]} cases")
    print(f"wrote {len(lines)} cases to {out_root}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out_dir)
    if args.synthetic:
        size = args.size or cfg.input_size
        spec = SyntheticSpec(n_cases=args.synthetic, size=size, seed=cfg.seed)
        cases = generate_synthetic(spec)
        cfg = apply_overrides(cfg, {"input_size": size})
        _info(f"generated {len(cases)} synthetic cases at {size}x{size}")
    elif args.data:
        try:
            cases = load_preprocessed_cases(args.data, split="train")
        except InputError:
            cases = load_preprocessed_cases(args.data)
        shape = cases[0].image.shape
        cfg = apply_overrides(cfg, {"input_size": shape[0]})
        _info(f"loaded {len(cases)} cases from {args.data}")
    else:
        raise InputError("train needs --data ROOT or --synthetic N")

    train_cfg = cfg.train_config()
    if args.target_dice is not None:
        train_cfg.target_train_dice = args.target_dice
    graph = build_model(cfg.variant, cfg.input_size, seed=cfg.seed,
                        unit_order=cfg.unit_order, aspp_merge=cfg.aspp_merge)
    _info(f"built {cfg.variant} at {cfg.input_size}x{cfg.input_size}: "
          f"{count_params(graph):,} trainable parameters")
    train_set, val_set = split_dataset(cases, cfg.val_fraction, cfg.seed)
    _info(f"split: {len(train_set)} train / {len(val_set)} val")
    log = _info if args.verbose else None
    graph, history = train(graph, train_set, val_set, train_cfg, out_dir=out_dir, log=log)
    save_checkpoint(graph, out_dir / "final.npz")
    save_config(cfg, out_dir / "run.ini")
    last = history.epochs[-1]
    print(f"stopped: {history.stop_reason}")
    print(f"epochs: {len(history.epochs)}  best_epoch: {history.best_epoch}")
    print(f"final train_dice: {last.train_dice:.4f}  val_dice: {last.val_dice:.4f}")
    print(f"checkpoint: {out_dir / 'final.npz'}")
    return 0


def cmd_evaluate(args) -> int:
    graph = load_checkpoint(args.checkpoint)
    split = args.split
    if split == "auto":
        try:
            cases = load_preprocessed_cases(args.data, split="test")
            split = "test"
        except InputError:
            cases = load_preprocessed_cases(args.data)
            split = "all"
    else:
        cases = load_preprocessed_cases(args.data, split=None if split == "all" else split)
    if not cases:
        raise InputError(f"no cases found in {args.data}")
    rules = parse_threshold_rules(args.thresholds) if args.thresholds else DEFAULT_THRESHOLD_RULES
    report = evaluate(graph, cases, threshold=args.threshold, rules=rules,
                      hausdorff_scale=args.hausdorff_scale)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores_csv(report, out_dir / "scores.csv")
    write_summary_json(report, out_dir / "summary.json")
    means = report.means
    print(f"cases: {len(report.cases)} ({split})")
    print(f"mean dice: {means['dice']:.4f}  mean iou: {means['iou']:.4f}  "
          f"mean accuracy: {means['accuracy']:.4f}")
    if means["hausdorff_finite"] is not None:
        print(f"mean hausdorff (finite): {means['hausdorff_finite']:.3f} px "
              f"({means['hausdorff_infinite_cases']} infinite)")
    for row in report.report.rows:
        avg = "null" if row.average is None else f"{row.average:.4f}"
        print(f"  {row.label():<22} cases: {row.case_count:<5} avg: {avg}")
    print(f"wrote {out_dir / 'scores.csv'} and {out_dir / 'summary.json'}")
    return 0


def _mask_boundary(mask: np.ndarray) -> np.ndarray:
    interior = mask.copy()
    interior[1:, :] &= mask[:-1, :]
    interior[:-1, :] &= mask[1:, :]
    interior[:, 1:] &= mask[:, :-1]
    interior[:, :-1] &= mask[:, 1:]
    return mask & ~interior


def cmd_predict(args) -> int:
    graph = load_checkpoint(args.checkpoint)
    raw = load_image(args.image)
    image = normalize(raw)
    size = graph.input_size
    if image.shape != (size, size):
        if not args.resize:
            raise InputError(
                f"input is {image.shape[0]}x{image.shape[1]} but the model expects "
                f"{size}x{size}; pass --resize to pad and scale"
            )
        dummy = np.zeros_like(image, dtype=np.uint8)
        image, _ = pad_to_square(image, dummy)
        image = np.clip(resize_bilinear(image, size), 0.0, 1.0)
    probs = graph.forward(image[None, :, :, None].astype(np.float32))[0, :, :, 0]
    mask = (probs >= args.threshold).astype(np.uint8)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    mask_path = out_dir / f"{stem}_pred.png"
    overlay_path = out_dir / f"{stem}_overlay.png"
    save_mask(mask_path, mask)
    boundary = _mask_boundary(mask.astype(bool))
    rgb = np.stack([image, image, image], axis=-1)
    rgb[boundary] = (1.0, 0.0, 0.0)
    from PIL import Image

    Image.fromarray((rgb * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(overlay_path)
    print(f"mask: {mask_path}")
    print(f"overlay: {overlay_path}")
    print(f"foreground pixels: {int(mask.sum())} / {mask.size}")
    return 0


def cmd_inspect(args) -> int:
    variant = canonical_variant(args.variant)
    graph = build_model(variant, args.input_size, seed=args.seed or 0)
    rows = summarize(graph)
    name_w = max(len(r[0]) for r in rows)
    print(f"{'block':<{name_w}}  {'output shape':<20}  params")
    for name, shape, n in rows:
        print(f"{name:<{name_w}}  {str(tuple(shape)):<20}  {n:,}")
    total = count_params(graph)
    print(f"total trainable parameters: {total:,} ({total / 1e6:.2f}M)")

    if args.check_tables:
        problems = []
        sched = FilterSchedule()
        paths = graph.respaths()
        if variant in ("connected_unets_plus", "connected_unets_plusplus"):
            if len(paths) != 11:
                problems.append(f"expected 11 residual skip paths, found {len(paths)}")
            expected = {1: (4, 32), 2: (3, 64), 3: (2, 128), 4: (1, 256)}
            want_counts = {(4, 32): 2, (3, 64): 3, (2, 128): 3, (1, 256): 3}
            got_counts: dict = {}
            for _, length, filters in paths:
                got_counts[(length, filters)] = got_counts.get((length, filters), 0) + 1
            if got_counts != want_counts:
                problems.append(f"skip path census {got_counts} != {want_counts}")
            del expected
        for lvl in (1, 2, 3, 4):
            triple = sched.multires_triple(lvl)
            if sum(triple) != sched.multires_width(lvl):
                problems.append(f"level {lvl} filter sum {triple} != {sched.multires_width(lvl)}")
        if variant != "unet":
            from .blocks import ASPP

            for name, mod in graph.net.named_modules():
                if isinstance(mod, ASPP) and mod.dilations != tuple(sched.aspp_dilations):
                    problems.append(f"{name}: dilations {mod.dilations} != {sched.aspp_dilations}")
        if problems:
            for p in problems:
                _err(f"schedule check failed: {p}")
            return 1
        print("schedule check: ok")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_cases=args.cases, size=args.size, seed=args.seed or 0,
                         noise_std=args.noise_std)
    cases = generate_synthetic(spec)
    if args.test_fraction > 0:
        n_test = max(1, int(round(args.test_fraction * len(cases))))
        write_dataset(cases[: len(cases) - n_test], args.out_root, split="train")
        write_dataset(cases[len(cases) - n_test:], args.out_root, split="test")
        print(f"wrote {len(cases) - n_test} train / {n_test} test cases to {args.out_root}")
    else:
        write_dataset(cases, args.out_root)
        print(f"wrote {len(cases)} cases to {args.out_root}")
    return 0


def cmd_dump_config(args) -> int:
    cfg = _load_run_config(args)
    save_config(cfg, args.path)
    print(f"wrote {args.path}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cunets",
        description="Connected double U-Net mass segmentation: preprocess, train, evaluate, predict.",
    )
    parser.add_argument("--version", action="version", version=f"cunets {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run-config file; flags override it")
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--verbose", action="store_true", help="progress lines to stderr")

    p = sub.add_parser("preprocess", help="convert a raw dataset into model-ready cases")
    common(p)
    p.add_argument("in_root", help="raw dataset root")
    p.add_argument("out_root", help="output root for preprocessed cases")
    p.add_argument("--profile", choices=("cbis_ddsm", "inbreast", "none"), default=None)
    p.add_argument("--target-size", dest="target_size", type=int, default=None)
    p.add_argument("--border-fraction", dest="border_fraction", type=float, default=None)
    p.add_argument("--clip-limit", dest="clip_limit", type=float, default=None)
    p.add_argument("--tiles", type=int, default=None, help="CLAHE tile grid (NxN)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed or synthetic dataset")
    common(p)
    p.add_argument("--data", help="preprocessed dataset root")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N generated blob cases")
    p.add_argument("--size", type=int, help="synthetic case size (with --synthetic)")
    p.add_argument("--variant", default=None, choices=VARIANTS)
    p.add_argument("--input-size", dest="input_size", type=int, default=None)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--target-dice", dest="target_dice", type=float, default=None,
                   help="stop once inference-mode train dice reaches this")
    p.add_argument("--out-dir", default="runs/latest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint against a dataset")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("data", help="preprocessed dataset root")
    p.add_argument("--split", default="auto", help="train|test|all (default: test if present)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--thresholds", help="rules like 'dice>=0.45,iou>=0.35,hausdorff<=2.75'")
    p.add_argument("--hausdorff-scale", dest="hausdorff_scale", type=float, default=None,
                   help="divide Hausdorff distances by this constant")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment a single image with a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--resize", action="store_true", help="pad/scale input to the model size")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="print a variant's block table and parameter count")
    common(p)
    p.add_argument("variant")
    p.add_argument("--input-size", dest="input_size", type=int, default=224)
    p.add_argument("--check-tables", action="store_true",
                   help="verify the skip/filter schedule census; nonzero exit on mismatch")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic blob dataset to disk")
    common(p)
    p.add_argument("out_root")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.05)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-config", help="write the merged run config to an INI file")
    common(p)
    p.add_argument("path")
    p.set_defaults(func=cmd_dump_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, InputError, CheckpointError) as exc:
        _err(str(exc))
        return 2
    except CunetsError as exc:
        _err(str(exc))
        return 1
    except KeyboardInterrupt:
        _err("interrupted")
        return 1


if __name__ == "__main__":
    sys.exit(main())
