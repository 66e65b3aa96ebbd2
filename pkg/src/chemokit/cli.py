"""Command line entry point: ``chemokit <kind> --config FILE [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .experiments import run_experiment
from .harness_io import KINDS, ConfigError, parse_config, write_outputs

logger = logging.getLogger("chemokit")

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chemokit", description="Keller-Segel experiment driver")
    p.add_argument("kind", choices=KINDS, help="study to run; selects the [kind] section of the config")
    p.add_argument("--config", required=True, type=Path, help="experiment config file")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir)")
    p.add_argument("--threads", type=int, default=None,
                   help="concurrent runs (default: $CHEMOKIT_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("CHEMOKIT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CHEMOKIT_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        spec = parse_config(text, args.kind)
        threads = _threads(args.threads)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out or (Path(spec.out_dir) if spec.out_dir else Path("chemokit_out") / spec.kind)
    result = run_experiment(spec, threads=threads)
    try:
        written = write_outputs(result, out_dir)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    sys.stdout.write(result.summary)
    logger.info("wrote %d files to %s", len(written), out_dir)
    return EXIT_RUN_FAILED if result.failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
