"""Command line interface: run experiments, compare reports, inspect checkpoints.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import load_checkpoint
from .config import load_config
from .errors import ConfigError, FeddivError
from .harness import compare_reports, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddiv")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a config file")
    run_p.add_argument("--config", default=None, help="JSON config path (defaults apply)")
    run_p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. "
                       "federation.rounds=10")
    run_p.add_argument("--out", default=None, help="output directory")

    cmp_p = sub.add_parser("compare", help="compare reports from compatible runs")
    cmp_p.add_argument("reports", nargs="+", help="report.json paths")

    ins_p = sub.add_parser("inspect", help="show checkpoint contents")
    ins_p.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.overrides)
            report = run_experiment(cfg, args.out)
            for mode, s in report["summary"].items():
                print(f"{mode}: {100 * s['mean']:.2f} ({100 * s['std']:.2f})")
        elif args.command == "compare":
            print(compare_reports(args.reports))
        elif args.command == "inspect":
            bundle, extra = load_checkpoint(args.checkpoint)
            print(f"extra: {extra}")
            for key in sorted(bundle):
                print(f"{key}: shape {tuple(bundle[key].shape)}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FeddivError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
