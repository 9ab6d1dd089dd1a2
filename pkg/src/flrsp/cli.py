"""Command line entry point.

    flrsp train   --config c.json --out runs/a [--seed N]
    flrsp attack  --run runs/a --attack april|opt
    flrsp analyze --run runs/a
    flrsp plot    --run runs/a
    flrsp run     --config c.json --out runs/a      (train + attack + summary)

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig
from .data import DatasetError
from .fl import TrainingDiverged
from . import harness

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        seeds = dict(cfg.seeds, root=args.seed)
        cfg = cfg.replace(seeds=seeds)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flrsp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p = sub.add_parser("attack")
    p.add_argument("--run", required=True)
    p.add_argument("--attack", choices=("april", "opt", "optimization"), default=None)
    for name in ("analyze", "plot"):
        p = sub.add_parser(name)
        p.add_argument("--run", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            harness.train(_load(args), args.out)
            harness.summarize(args.out)
        elif args.command == "run":
            harness.run_experiment(_load(args), args.out)
        elif args.command == "attack":
            harness.attack(args.run, args.attack)
            summary = harness.summarize(args.run)
            print(f"median SSIM {summary['median_ssim']:.4f} "
                  f"({'protected' if summary['protected'] else 'leaked'})")
        elif args.command == "analyze":
            for row in harness.analyze(args.run):
                print(f"f={row['f']:3d}  flrsp={row['flrsp']:.6f}  frozen={row['frozen']:.6f}  "
                      f"standard={row['standard']:.6f}")
        elif args.command == "plot":
            for path in harness.plot(args.run):
                print(path)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
