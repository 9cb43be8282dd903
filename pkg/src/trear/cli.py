"""Command-line entry point: ``trear <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .data import SynthConfig, generate_synthetic_dataset
from .harness import ablate, evaluate, export_attention, format_ablation, grad_check, train


def _gen_data(args) -> int:
    t, m = args.classes
    cfg = SynthConfig(textures=t, motions=m, clips_per_class=args.clips_per_class, frames=args.frames,
                      side=args.side, test_fraction=args.test_fraction, seed=args.seed)
    manifest = generate_synthetic_dataset(cfg, args.out)
    print(f"wrote {cfg.num_classes * cfg.clips_per_class} clips in {cfg.num_classes} classes; manifest {manifest}")
    return 0


def _train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['train_loss']:.4f} train {last['train_acc']:.3f} "
              f"test {last['test_acc']:.3f}")
    print(f"checkpoint {cfg.checkpoint}; metrics {cfg.metrics}")
    return 0


def _eval(args) -> int:
    res = evaluate(args.ckpt, args.manifest, args.split)
    print(f"accuracy {res.accuracy:.4f} ({int(np.trace(res.confusion))}/{int(res.confusion.sum())})")
    print("confusion (rows true, columns predicted):")
    for row in res.confusion:
        print("  " + " ".join(f"{v:4d}" for v in row))
    return 0


def _grad_check(args) -> int:
    report = grad_check(args.seed, max_entries=args.max_entries)
    print(report.format())
    return 0 if report.passed else 1


def _export(args) -> int:
    files = export_attention(args.ckpt, args.clip, args.out)
    print(f"wrote {len(files)} attention maps to {args.out}")
    return 0


def _ablate(args) -> int:
    cfg = load_config(args.config)
    rows = ablate(cfg)
    text = format_ablation(rows)
    print(text)
    if cfg.ablation_out:
        out = Path(cfg.ablation_out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trear", description="Two-stream RGB-D transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic RGB-D dataset")
    p.add_argument("--classes", type=int, nargs=2, metavar=("T", "M"), required=True,
                   help="texture identities and depth-motion patterns")
    p.add_argument("--clips-per-class", type=int, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=1 / 3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_data)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=24, help="entries sampled per block; 0 checks all")
    p.set_defaults(func=_grad_check)

    p = sub.add_parser("export-attn", help="dump attention maps of one clip as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_export)

    p = sub.add_parser("ablate", help="train the fusion and crop ablation grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
