"""Command-line entry point: train, eval, predict, selftest, info.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, format_config, load_config
from .data import DataError
from .model import format_cost_report
from .optim import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d2aunet", description="D2A U-Net segmentation harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on images/ + masks/")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", help="also write the metrics row to this CSV file")

    p = sub.add_parser("predict", help="write mask and overlay for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run oracle, gradient and invariant checks")
    p.add_argument("--inject-fault", choices=["conv-grad"], help=argparse.SUPPRESS)

    p = sub.add_parser("info", help="print config, parameter count and FLOPs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--config")
    p.add_argument("--size", type=int, help="input extent for the FLOPs figure")
    return parser


def _run(args) -> int:
    if args.command == "train":
        from .train import train

        cfg = load_config(args.config)
        trainer = train(cfg, args.resume)
        print(f"trained to epoch {trainer.epoch}; outputs in {cfg.out_dir}")
        return EXIT_OK

    if args.command == "eval":
        from .train import evaluate_checkpoint

        loss, summary, counts, row = evaluate_checkpoint(args.ckpt, args.data, args.csv)
        print("epoch,split,loss,dice,pixel_error,recall,lr")
        print(row)
        print(f"tp={counts.tp} fp={counts.fp} tn={counts.tn} fn={counts.fn}")
        return EXIT_OK

    if args.command == "predict":
        from .train import predict

        mask, overlay, notes = predict(args.ckpt, args.image, args.out)
        for note in notes:
            print(f"note: {note}")
        print(f"mask: {mask}\noverlay: {overlay}")
        return EXIT_OK

    if args.command == "selftest":
        from . import selftest

        return EXIT_OK if selftest.run(fault=args.inject_fault) else EXIT_NUMERIC

    if args.command == "info":
        if args.ckpt:
            from .train import Trainer

            trainer = Trainer.from_checkpoint(Checkpoint.load(args.ckpt))
            cfg = trainer.cfg
            print(f"checkpoint epoch: {trainer.epoch}")
        else:
            cfg = load_config(args.config)
        print(format_config(cfg), end="")
        print(format_cost_report(cfg.model, args.size), end="")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
