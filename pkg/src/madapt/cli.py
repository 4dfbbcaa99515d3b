"""Command-line entry point: ``madapt <command> --config PATH [--set k=v] [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from madapt.config import RunConfig
from madapt.errors import ConfigError, MadaptError
from madapt.pipeline import COMMANDS

log = logging.getLogger("madapt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madapt", description="Meta-adaptive pretraining laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default=None, help="output directory (must be empty or absent)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else ConfigError.exit_code
    try:
        config = RunConfig.load(args.config, args.set, args.seed)
        manifest = COMMANDS[args.command](config, args.out)
    except MadaptError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3
    log.info("%s finished: %d artifacts in %.2fs", args.command, len(manifest["artifacts"]),
             manifest["timings"]["total"])
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
