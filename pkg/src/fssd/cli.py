"""Command-line entry point.

    fssd train --config run.cfg [--seed N] [--out DIR]
    fssd fit   --config run.cfg
    fssd eval  --config run.cfg
    fssd sweep --config run.cfg
    fssd probe --config run.cfg
    fssd score --config run.cfg --input samples.csv [--output scores.csv]
    fssd all   --config run.cfg        (train, fit, eval, sweep, probe in order)
"""

import argparse
import logging
import sys

from fssd import pipeline
from fssd.checkpoint import CheckpointError
from fssd.config import ConfigError, RunConfig
from fssd.data import DataFormatError

STAGES = ("train", "fit", "eval", "sweep", "probe")


def build_parser():
    parser = argparse.ArgumentParser(prog="fssd", description="Feature-space singularity distance OoD detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("score", "all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "score":
            p.add_argument("--input", required=True, help="CSV (one column per input value) or IDX image file")
            p.add_argument("--output", help="scores CSV path (default: <out>/score_<input>.csv)")
    return parser


def load_config(args):
    overrides = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    return RunConfig.load(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "score":
            path = pipeline.cmd_score(cfg, args.input, args.output)
            print(path)
        elif args.command == "all":
            for stage in STAGES:
                pipeline.COMMANDS[stage](cfg)
        else:
            pipeline.COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, CheckpointError, DataFormatError, pipeline.ContaminationError,
            ValueError) as exc:
        print(f"fssd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
