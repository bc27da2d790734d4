"""Command line entry point: ``advdrive <stage> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, default_config, dump_config, load_scene_config
from .pipeline import STAGES, MissingArtifact, format_table, run_pipeline

SUBCOMMANDS = ("build", "capture", "fit", "train", "attack", "transfer", "evaluate", "export", "run",
               "retrain", "print-config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advdrive", description=__doc__)
    ap.add_argument("command", choices=SUBCOMMANDS,
                    help="stage to run; 'run' executes --stage (default: build..evaluate)")
    ap.add_argument("--config", help="scenario config file (defaults are used when omitted)")
    ap.add_argument("--stage", help="comma-separated stage list for 'run'")
    ap.add_argument("--seed", type=int, help="run a single attack seed instead of the configured set")
    ap.add_argument("--jobs", type=int, help="parallel attack jobs")
    ap.add_argument("--out", help="run directory (overrides [run] out)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_scene_config(args.config) if args.config else default_config()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "print-config":
        sys.stdout.write(dump_config(cfg))
        return 0
    if args.command == "run":
        stages = args.stage.split(",") if args.stage else STAGES[:7]
    else:
        stages = [args.command]
    seeds = [args.seed] if args.seed is not None else None
    try:
        res = run_pipeline(cfg, stages, out=args.out, seeds=seeds, jobs=args.jobs)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for st, out in res["stages"].items():
        if st == "evaluate":
            sys.stdout.write(format_table(out))
        else:
            print(f"# {st}")
            print(json.dumps(_summary(out), sort_keys=True))
    return 0


def _summary(obj):
    # Long histories are shortened on the console; files keep everything.
    if isinstance(obj, dict):
        return {k: _summary(v) for k, v in obj.items()}
    if isinstance(obj, list) and len(obj) > 6:
        return obj[:2] + ["..."] + obj[-2:]
    return obj


if __name__ == "__main__":
    sys.exit(main())
