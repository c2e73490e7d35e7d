"""Command-line entry point: ``dpsnet {train,evaluate,gradcheck,synth}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import gradcheck
from .synth import ImageIOError, load_dataset, synthetic_dataset, write_dataset
from .train import CHECKPOINT_NAME, ConfigError, TrainConfig, evaluate, restore, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_GRADCHECK = 4


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    p.add_argument("--config", required=True, help="key = value config file")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset root with images/, masks/, boundaries/")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="train on N generated samples (default: synthetic_count from config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("evaluate", help="per-image and mean metrics as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=_size, default=(96, 96), help="HxW, e.g. 96x96")
    p.add_argument("--difficulty", type=float, default=0.6)
    p.add_argument("--out", required=True)
    return parser


def _train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.data:
        _, samples = load_dataset(args.data)
    else:
        count = cfg.synthetic_count if args.synthetic is None else args.synthetic
        samples = synthetic_dataset(cfg.data_seed, count, tuple(cfg.input_size), cfg.difficulty)

    def progress(row):
        print(f"epoch {row['epoch']} step {row['step']} lr {row['lr']:.3g} loss {row['total']:.4f}")

    result = train(cfg, samples, args.out, progress=None if args.quiet else progress)
    print(f"wrote {Path(args.out) / CHECKPOINT_NAME} after {result.optimizer.step_count} steps")
    return EXIT_OK


def _evaluate(args) -> int:
    _, model, _ = restore(ckpt_io.load(args.checkpoint))
    names, samples = load_dataset(args.data)
    rows = evaluate(model, names, samples, args.csv)
    m = rows[-1]
    print(f"mean over {len(names)} images: MAE {m['mae']:.4f}  S {m['s_measure']:.4f}  "
          f"E {m['e_measure']:.4f}  Fw {m['weighted_f']:.4f}")
    return EXIT_OK


def _gradcheck(args) -> int:
    names = args.suite or list(gradcheck.SUITES)
    unknown = [n for n in names if n not in gradcheck.SUITES]
    if unknown:
        raise ConfigError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    failed = 0
    for name in names:
        r = gradcheck.run_suite(name, args.seed)
        failed += not r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} rel_err {r.error:.2e}  coords {r.coords}")
    print(f"{len(names) - failed}/{len(names)} suites passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if failed == 0 else EXIT_GRADCHECK


def _synth(args) -> int:
    try:
        samples = synthetic_dataset(args.seed, args.count, args.size, args.difficulty)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


COMMANDS = {"train": _train, "evaluate": _evaluate, "gradcheck": _gradcheck, "synth": _synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ckpt_io.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # ConfigError plus shape/size validation raised while building the run
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ImageIOError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
