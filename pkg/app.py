#!/usr/bin/env python3
"""
Command-line entry point: synthesize data, train, sample, evaluate,
benchmark and run stage/fusion ablations.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Sequence

import orjson
from rich.console import Console
from rich.table import Table

from services.checkpoint import save_checkpoint
from services.config import MageConfig, load_config
from services.dataio import extract_condition, load_clip, load_dataset, save_clip, save_dataset, split_dataset
from services.errors import CheckpointError, ConfigError, DataError, InvalidArgument, MageError
from services.metrics import evaluate_clips, mean_local_pose, mean_pose_baseline, rest_pose_baseline
from services.motion_synth import KINDS, synth_dataset
from services.pipeline import Engine, bench, run_ablation, sample_clip, sample_references, write_positions_csv
from services.settings import get_settings, setup_logging
from services.skeleton import load_skeleton
from services.training import train_from_clips

logger = logging.getLogger("mage")
console = Console()

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_INVALID = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


def _config(args) -> MageConfig:
    path = getattr(args, "config", None) or get_settings().config
    return load_config(path)


def _write_jsonl(path: Path, records: Sequence[Dict]) -> None:
    with open(path, "wb") as f:
        for r in records:
            f.write(orjson.dumps(r, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")
    logger.info("wrote %d records to %s", len(records), path)


def _table(title: str, rows: List[Dict], columns: Sequence[str]) -> None:
    table = Table(title=title)
    for c in columns:
        table.add_column(c, justify="left" if c in ("clip", "variant", "fusion") else "right")
    for r in rows:
        table.add_row(*(f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    console.print(table)


def _split(cfg: MageConfig, clips):
    holdout = min(cfg.data.holdout, len(clips) - 1)
    return split_dataset(clips, holdout, seed=cfg.data.seed)


def cmd_synth(args) -> int:
    clips = synth_dataset(args.kind, args.count, frames=args.frames, fps=args.fps, seed=args.seed)
    manifest = save_dataset(args.out, clips)
    console.print(f"wrote {len(clips)} clips, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": args.seed})})
    skel, scales = load_skeleton()
    train_clips, _ = _split(cfg, load_dataset(args.data))
    result = train_from_clips(
        train_clips, cfg, skel, scales, steps=args.steps, log_path=args.log, progress=not args.quiet
    )
    save_checkpoint(args.out_checkpoint, result.model, result.stats, result.sched)
    first, last = result.history[0], result.history[-1]
    console.print(
        f"L_obj {first['l_obj']:.4f} -> {last['l_obj']:.4f} (smoothed {last['smoothed']:.4f}), "
        f"checkpoint {args.out_checkpoint}"
    )
    return EXIT_OK


def _inference_cfg(cfg: MageConfig, args):
    update = {}
    if getattr(args, "seed", None) is not None:
        update["seed"] = args.seed
    if getattr(args, "sampler", None):
        update["sampler"] = args.sampler
    return cfg.inference.model_copy(update=update)


def cmd_sample(args) -> int:
    cfg = _config(args)
    icfg = _inference_cfg(cfg, args)
    skel, _ = load_skeleton()
    engine = Engine.from_checkpoint(args.checkpoint)
    source = load_clip(args.conditions)
    clip = sample_clip(extract_condition(source, skel), engine, icfg, skel, fps=source.fps)
    save_clip(args.out, clip)
    if args.csv:
        write_positions_csv(args.csv, clip, skel)
    console.print(f"generated {len(clip)} frames -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    icfg = _inference_cfg(cfg, args)
    skel, _ = load_skeleton()
    engine = Engine.from_checkpoint(args.checkpoint, expected=cfg.model if args.config else None)
    clips = load_dataset(args.data)
    train_clips, test_clips = (clips, clips) if args.all else _split(cfg, clips)
    preds = sample_references(test_clips, engine, icfg, skel, progress=True)
    report = evaluate_clips(preds, test_clips, skel, progress=True)
    records = [{"method": "model", **r} for r in report.records()]
    summary = [{"method": "model", **asdict(report.aggregate)}]
    if args.baselines:
        mean_pose = mean_local_pose(train_clips)
        baselines = {
            "rest_pose": [rest_pose_baseline(gt, skel) for gt in test_clips],
            "mean_pose": [mean_pose_baseline(gt, mean_pose, skel) for gt in test_clips],
        }
        for method, bpreds in baselines.items():
            brep = evaluate_clips(bpreds, test_clips, skel)
            records += [{"method": method, **r} for r in brep.records()]
            summary.append({"method": method, **asdict(brep.aggregate)})
    if args.report:
        _write_jsonl(args.report, records)
    _table(
        "evaluation",
        summary,
        ("method", "mpjre", "mpjpe", "mpjve", "jitter", "gt_jitter", "hand_pe", "upper_pe", "lower_pe", "root_pe"),
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    engine = Engine.from_checkpoint(args.checkpoint)
    report = bench(engine.model, _inference_cfg(cfg, args), args.iterations, sched=engine.sched)
    row = asdict(report)
    if args.report:
        _write_jsonl(args.report, [row])
    _table("bench", [row], list(row))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    skel, scales = load_skeleton()
    train_clips, test_clips = _split(cfg, load_dataset(args.data))
    records = run_ablation(cfg, train_clips, test_clips, skel, scales, steps=args.steps, progress=not args.quiet)
    if args.report:
        _write_jsonl(args.report, records)
    _table("ablation", records, ("variant", "final_loss", "mpjre", "mpjpe", "mpjve", "jitter"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Full-body motion from head and wrist tracking",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python app.py synth --count 512 --out data/mixed
  python app.py train --data data/mixed --config configs/desk.yaml --out-checkpoint runs/desk.magk
  python app.py eval --checkpoint runs/desk.magk --data data/mixed --config configs/desk.yaml --baselines
  python app.py sample --checkpoint runs/desk.magk --conditions data/mixed/clips/00000.mage --out runs/sample.mage
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural motion dataset")
    p.add_argument("--kind", choices=KINDS, default="mixed")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out-checkpoint", type=Path, required=True)
    p.add_argument("--log", type=Path, help="JSONL metrics log")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate full-body motion for the observations of a clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--conditions", type=Path, required=True, help="motion file providing head and wrist tracks")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csv", type=Path, help="also dump per-frame joint positions")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out clips of a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--report", type=Path, help="JSONL report")
    p.add_argument("--baselines", action="store_true", help="also score the rest-pose and mean-pose baselines")
    p.add_argument("--all", action="store_true", help="evaluate every clip instead of the held-out split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time window sampling")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--sampler", choices=("ddim", "ddpm"))
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train and compare stage sets and fusion modes")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--report", type=Path)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("DEBUG" if args.verbose else None)
    try:
        return args.func(args)
    except (InvalidArgument, ConfigError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except DataError as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except CheckpointError as e:
        logger.error("checkpoint error: %s", e)
        return EXIT_CHECKPOINT
    except MageError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
