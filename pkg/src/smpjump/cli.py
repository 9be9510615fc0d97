"""Command line: ``smpjump KIND [--config PATH] [--seed N] [--paths N] [--out DIR] [--threads N]``.

Exit status: 0 when every check passes, 1 when any check fails or a stage
errors, 2 on a configuration error.
"""

import argparse
import os
import sys

from .config import KINDS, ConfigError, build_config, load_config
from .experiments import StageError, format_table, run_experiment, write_report

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="smpjump", description="Run a stochastic maximum principle experiment.")
    parser.add_argument("kind", choices=KINDS, help="experiment kind")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--paths", type=int, help="override the number of paths")
    parser.add_argument("--out", help="output directory (default: config 'output' / kind)")
    parser.add_argument("--threads", type=int, help="worker threads for sampling")
    parser.add_argument("--quiet", action="store_true", help="print only the verdict line")
    return parser


def resolve_config(args):
    """Config from file and flags; flags override file values."""
    overrides = {k: v for k, v in (("seed", args.seed), ("paths", args.paths), ("threads", args.threads))
                 if v is not None}
    if args.config:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.kind!r}")
        return cfg.with_overrides(overrides) if overrides else cfg
    return build_config({"kind": args.kind, **overrides})


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.path.join(cfg["output"], cfg.kind)
    try:
        report = run_experiment(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_report(report, out)
    if not args.quiet:
        print(format_table(report))
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{cfg.kind}: {verdict} ({len(report.checks)} checks, {report.wall_clock:.1f} s) -> {out}")
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
