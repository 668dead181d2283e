"""Command line entry point: ``lrwalk SUBCOMMAND [--config ...] [--set K=V ...]``.

Exit status: 0 when every verdict passes, 2 when any verdict fails, 1 on an
operational error (invalid configuration, missing artifacts, numerical
failure).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import PRESETS, resolve
from .errors import ConfigError, LRWalkError, MissingDependencyError
from .pipeline import STAGES, RUNNERS, Experiment, write_json

log = logging.getLogger("lrwalk")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors are operational errors (exit 1); exit 2 is reserved for FAIL verdicts."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="lrwalk",
        description="Long-range random walks: heat kernels, Monte Carlo and bound certificates.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("subcommand", choices=STAGES + ("all",))
    parser.add_argument("--config", help=f"JSON config path or preset ({', '.join(PRESETS)})")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="K=V", help="override a config field (repeatable)")
    parser.add_argument("--workers", type=int, default=1, help="Monte Carlo worker threads")
    parser.add_argument("--seed", type=int, help="Monte Carlo seed (overrides LRWALK_SEED)")
    parser.add_argument("--out", help="output directory (overrides LRWALK_OUT)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(subcommand: str, config: str | None = None, overrides=(), workers: int = 1,
        seed: int | None = None, out: str | None = None) -> int:
    try:
        cfg = resolve(config, overrides, seed=seed, out=out)
    except ConfigError as exc:
        print(f"error: config-invalid: {exc}", file=sys.stderr)
        return EXIT_ERROR
    exp = Experiment(cfg, workers=workers)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    write_json(Path(cfg.out) / "effective-config.json", cfg.to_dict())
    stages = STAGES if subcommand == "all" else (subcommand,)
    verdicts, timings = {}, {}
    started = time.time()
    try:
        for stage in stages:
            t0 = time.perf_counter()
            for name, ok in RUNNERS[stage](exp).items():
                verdicts[f"{stage}.{name}"] = bool(ok)
            timings[stage] = time.perf_counter() - t0
            log.info("%s done in %.1fs", stage, timings[stage])
    except MissingDependencyError as exc:
        print(f"error: missing-dependency: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (LRWalkError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, ok in verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    write_json(Path(cfg.out) / f"verdicts.{subcommand}.json", verdicts)
    # timestamps live apart from the reproducible artifacts
    write_json(Path(cfg.out) / f"run-metadata.{subcommand}.json",
               {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                "seconds": timings, "workers": workers, "version": __version__})
    return EXIT_OK if all(verdicts.values()) else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return run(args.subcommand, args.config, args.overrides, args.workers, args.seed, args.out)


if __name__ == "__main__":
    sys.exit(main())
