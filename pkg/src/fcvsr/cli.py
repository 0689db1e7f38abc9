"""Command-line entry point: ``fcvsr <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import PRESETS, Config, load_config, preset, save_config
from .data import Degradation, prepare_dataset, write_synthetic_dataset

log = logging.getLogger("fcvsr")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON file with model/loss/train sections")
    p.add_argument("--preset", choices=sorted(PRESETS) + ["custom"], help="model preset (overrides the file)")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help="ablation tag, e.g. no-mffr or Q-sweep:4")
    p.add_argument("--channels", type=int, help="feature width c")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int, help="HR crop side; 0 trains on full frames")
    p.add_argument("--schedule-scale", type=float, help="multiplier on milestones and total length")
    p.add_argument("--no-augment", action="store_true")


def build_config(args: argparse.Namespace) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.preset:
        model = preset(args.preset) if args.preset != "custom" else cfg.model
        cfg = replace(cfg, model=model, preset=args.preset)
    model_upd, train_upd = {}, {}
    if args.channels is not None:
        model_upd["channels"] = args.channels
    if args.seed is not None:
        train_upd["seed"] = args.seed
    if args.lr is not None:
        train_upd["lr"] = args.lr
    if args.batch_size is not None:
        train_upd["batch_size"] = args.batch_size
    if args.patch_size is not None:
        train_upd["patch_size"] = args.patch_size or None
    if args.schedule_scale is not None:
        train_upd["schedule_scale"] = args.schedule_scale
    if args.no_augment:
        train_upd["augment"] = False
    return cfg.with_updates(model=model_upd, train=train_upd)


def cmd_prepare(args) -> int:
    deg = Degradation(args.mode, args.value, args.encoder_cmd, args.scale)
    manifest = prepare_dataset(args.src, args.out, deg, args.image_channels, args.workers)
    failed = [s.name for s in manifest.sequences if s.status != "ok"]
    print(f"wrote {manifest.path} ({len(manifest.sequences) - len(failed)} ok, {len(failed)} failed)")
    for name in failed:
        print(f"  failed: {name}", file=sys.stderr)
    return 1 if failed and len(failed) == len(manifest.sequences) else 0


def cmd_train(args) -> int:
    from .engine import apply_variant, train

    cfg = build_config(args)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = train(cfg, args.manifest, out, resume=args.resume, max_steps=args.steps)
    last = result.rows[-1] if result.rows else {}
    print(f"trained {result.step} steps; checkpoint {result.checkpoint}; L_all {last.get('L_all', float('nan')):.6f}")
    return 0


def cmd_eval(args) -> int:
    from .engine import evaluate

    report = evaluate(args.checkpoint, args.manifest, args.out, args.vmaf_cmd)
    report.pop("rows")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    from .engine import infer

    written = infer(args.checkpoint, args.frames, args.out)
    print(f"wrote {len(written)} frames to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .engine import ablate

    if not args.variant:
        raise ValueError("--variant is required for ablate")
    summary = ablate(build_config(args), args.variant, args.manifest, args.out, args.eval_manifest, args.steps)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_params(args) -> int:
    from .model import parameter_report

    print(json.dumps(parameter_report(args.channels or 64), indent=2))
    return 0


def cmd_synth(args) -> int:
    root = write_synthetic_dataset(args.out, args.sequences, args.frames, args.size, args.image_channels, args.seed)
    print(f"wrote {args.sequences} synthetic sequences to {root}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcvsr", description="Compressed video super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="downsample and encode HR sequences, write a manifest")
    p.add_argument("src", type=Path, help="directory of HR sequence folders")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=["QP", "CRF", "none"], default="none")
    p.add_argument("--value", type=int, help="QP or CRF value")
    p.add_argument("--encoder-cmd", help="shell template with {input} {output} {qp} {crf}")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--image-channels", type=int, choices=[1, 3], default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared manifest")
    _add_config_args(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM (and optional VMAF) of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--vmaf-cmd", help="shell template with {ref} {dist} frame directories")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve a directory of LR frames")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("frames", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train one ablation variant")
    _add_config_args(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--eval-manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="parameter counts of both presets against reference sizes")
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write synthetic HR sequences for smoke tests")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--image-channels", type=int, choices=[1, 3], default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
