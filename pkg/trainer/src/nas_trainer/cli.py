"""Trainer-bridge command line.

Subcommands:
    serve           run the JSON-lines evaluator loop on stdin/stdout
    retrain         fully train one architecture and export ONNX + metrics
    make-synthetic  write a synthetic dataset in the CIFAR-10 binary format
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from nas_trainer.data import DatasetUnavailableError, make_synthetic_dataset
from nas_trainer.onnx_export import retrain_and_export
from nas_trainer.protocol import serve_evaluator
from nas_trainer.train import TrainConfig

logger = logging.getLogger("nas_trainer")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("NAS_LOG_LEVEL", "error").lower(), logging.ERROR
    )
    # stdout carries the wire protocol; logs go to stderr
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.load(path)


def cmd_serve(args) -> int:
    config = _load_config(args.config)
    try:
        serve_evaluator(config)
    except DatasetUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def cmd_retrain(args) -> int:
    config = _load_config(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    with open(args.arch, "r", encoding="utf-8") as fh:
        graph_doc = json.load(fh)
    try:
        metrics = retrain_and_export(graph_doc, config, args.out)
    except DatasetUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(metrics))
    return 0


def cmd_make_synthetic(args) -> int:
    root = make_synthetic_dataset(args.out, n_train=args.train, n_test=args.test, seed=args.seed)
    print(f"wrote synthetic CIFAR-10-format dataset to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nas-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="speak the evaluator protocol on stdin/stdout")
    p.add_argument("--config", default=None, help="train-config JSON file")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("retrain", help="full training + ONNX export")
    p.add_argument("--arch", required=True, help="graph JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="train-config JSON file")
    p.add_argument("--epochs", type=int, default=500)
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("make-synthetic", help="write a synthetic binary-format dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_synthetic)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
