"""Command line: ``gme <stage> --config PATH --out DIR [--seed INT] [--variant NAME]``.

Exit status 0 on success, 2 for configuration errors, 3 when a stage fails.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .data import ConfigError
from .experiment import ExperimentConfig
from .pipeline import STAGES, SWEEP_AXES, Pipeline, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("gme")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gme", description="Cold-start ID embedding experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("sweep",):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="run this master seed only")
        s.add_argument("--variant", action="append", help="restrict to this variant (repeatable)")
        s.add_argument("-q", "--quiet", action="store_true")
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=SWEEP_AXES)
            s.add_argument("--values", required=True, help="comma-separated axis values")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.variant:
        cfg = replace(cfg, variants=[v for v in cfg.variants if v in args.variant] or list(args.variant))
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        pipe = Pipeline(cfg, args.out)
        if args.command == "sweep":
            path = pipe.sweep(args.axis, [v for v in args.values.split(",") if v])
            print(path)
        else:
            outcome = pipe.run(args.command)
            if args.command == "report":
                print((pipe.out / "report.txt").read_text(), end="")
            log.info("ran %d units, skipped %d", len(outcome.ran), len(outcome.skipped))
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except StageError as e:
        log.error("%s", e)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
