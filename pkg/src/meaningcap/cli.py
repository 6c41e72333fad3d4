"""Command-line entry point.

Exit codes for every subcommand: 0 success, 1 bad input (missing or
malformed files, invalid configuration), 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import torch

from .data import generate_synthetic_dataset, load_dataset
from .errors import MeaningCapError
from .evaluation import EvalReport, evaluate_model
from .training import (
    PHASES,
    TrainingConfig,
    build_trainer,
    load_checkpoint,
    prepare_vocabulary,
    save_checkpoint,
)

DATA_ENV = "MEANINGCAP_DATA"
log = logging.getLogger("meaningcap")


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise MeaningCapError(f"--data: no dataset root given and ${DATA_ENV} is unset")
    return Path(root)


def _config(args) -> TrainingConfig:
    config = TrainingConfig.load(args.config) if args.config else TrainingConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def cmd_synth(args) -> int:
    out = Path(args.out or os.environ.get(DATA_ENV) or "data")
    generate_synthetic_dataset(
        args.videos,
        args.events,
        0 if args.seed is None else args.seed,
        d_vis=args.d_vis,
        frames=(args.min_frames, args.max_frames),
        val_fraction=args.val_fraction,
        test_fraction=args.test_fraction,
        out=out,
    )
    print(f"wrote {args.videos} videos to {out}")
    return 0


def cmd_prepare(args) -> int:
    config = _config(args)
    root = _data_root(args)
    data = load_dataset(root, config.max_frames)
    vocab = prepare_vocabulary(data, args.min_count if args.min_count is not None else config.vocab_min_count)
    out = Path(args.out) if args.out else root / "vocab.json"
    vocab.save(out)
    print(f"vocabulary of {len(vocab)} tokens -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    data = load_dataset(_data_root(args), config.max_frames)
    out = Path(args.out or "run")
    if args.checkpoint:
        trainer = load_checkpoint(args.checkpoint, config)
    else:
        trainer = build_trainer(config, data)
    phases = PHASES if args.phase == "all" else (args.phase,)
    out.mkdir(parents=True, exist_ok=True)
    for phase in phases:
        if phase == "word":
            trainer.train_word_phase(data)
        elif phase == "pretrain":
            trainer.pretrain_meaning(data)
        else:
            trainer.train_mixed_phase(data)
        path = save_checkpoint(trainer, out / f"{phase}.ckpt")
        print(f"{phase} phase done -> {path}")
    save_checkpoint(trainer, out / "model.ckpt")
    return 0


def cmd_generate(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    data = load_dataset(_data_root(args), trainer.config.max_frames)
    ids = trainer.caption(data, args.split)
    lines = [json.dumps({"caption": " ".join(trainer.vocab.decode(ids[v])), "video_id": v}, sort_keys=True) for v in sorted(ids)]
    text = "\n".join(lines) + "\n" if lines else ""
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    names = args.name or []
    report = EvalReport(args.split)
    data = None
    for i, ckpt in enumerate(args.checkpoint):
        trainer = load_checkpoint(ckpt)
        if data is None:
            data = load_dataset(_data_root(args), trainer.config.max_frames)
        evaluate_model(trainer, data, args.split, names[i] if i < len(names) else Path(ckpt).stem, report)
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="training config (JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output path (file or directory, per subcommand)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="meaningcap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--events", type=int, default=5)
    p.add_argument("--d-vis", type=int, default=2048)
    p.add_argument("--min-frames", type=int, default=8)
    p.add_argument("--max-frames", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="build vocab.json for a dataset")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--min-count", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="run training phases")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--phase", choices=[*PHASES, "all"], default="all")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="greedy captions to JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU4 / METEOR-lite / CIDEr report")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat to compare models")
    p.add_argument("--name", action="append", help="row name per checkpoint")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--split", default="test")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (MeaningCapError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
