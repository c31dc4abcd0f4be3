"""Command line entry point: ``hopforge <stage> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, config_schema, validate_config
from .pipeline import STAGES, DependencyError, PipelineError, run_all, run_stage

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hopforge", description="Multi-hop QA and reasoning data pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "all"]:
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", required=True, help="pipeline config (JSON)")
        p.add_argument("--workdir", help="override the configured working directory")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("validate", help="check a config file and print the effective config")
    p.add_argument("--config", required=True)
    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = validate_config(args.config)
        overrides = {}
        if getattr(args, "workdir", None):
            overrides["workdir"] = args.workdir
        if getattr(args, "seed", None) is not None:
            overrides["rng_seed"] = args.seed
        if overrides:
            base = cfg.base_dir
            cfg = cfg.model_validate({**cfg.model_dump(), **overrides})
            cfg._base_dir = base
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(json.dumps(cfg.effective(), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        reports = run_all(cfg) if args.command == "all" else [run_stage(cfg, args.command)]
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for report in reports:
        print(json.dumps({"stage": report["stage"], "counts": report["counts"]}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
