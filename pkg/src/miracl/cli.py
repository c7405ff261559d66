"""Command line entry point.

    miracl run CONFIG [--seed N] [--out DIR] [--override key=value ...]
    miracl rerun MANIFEST [--out DIR]
    miracl export-task COMPLEXITY PATH [--seed N] [--perturb]
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .env import build_task, save_task
from .experiment import rerun, run_experiment


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="miracl", description="Meta multi-objective RL experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="replace the config's seed list")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config field override, e.g. meta.alpha=0.01 (repeatable)")

    re = sub.add_parser("rerun", help="re-execute the config recorded in a manifest")
    re.add_argument("manifest")
    re.add_argument("--out", default=None)

    ex = sub.add_parser("export-task", help="write a canonical task as YAML")
    ex.add_argument("complexity", choices=("simple", "moderate", "complex"))
    ex.add_argument("path")
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--perturb", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            text = Path(args.config).read_text() if Path(args.config).exists() else None
            cfg = load_config(args.config, args.override, args.seed, args.out)
            out = run_experiment(cfg, text)
        elif args.command == "rerun":
            out = rerun(args.manifest, args.out)
        else:
            save_task(build_task(args.complexity, args.perturb, args.seed), args.path)
            out = Path(args.path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
