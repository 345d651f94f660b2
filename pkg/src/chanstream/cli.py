"""Command line: ``chanstream run --config PATH`` and the internal ``self`` entry."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .launcher import MODES, launch, load_config, run_self


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanstream", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="launch every rank of a run configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--mode", choices=MODES, default=None, help="override the configured mode")

    me = sub.add_parser("self", help="(internal) run a single rank of a sockets-mode launch")
    me.add_argument("--rank", type=int, required=True)
    me.add_argument("--config", required=True)
    me.add_argument("--report-dir", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "self":
            return run_self(args.config, args.rank, args.report_dir)
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    result = launch(cfg, args.mode)
    print(result.format())
    if result.metrics_path is not None:
        print(f"metrics: {result.metrics_path}")
    return result.exit_code
