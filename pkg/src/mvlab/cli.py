"""Command line: ``mvlab run <config>``, ``mvlab presets``, ``mvlab validate <config>``.

Exit status: 0 when every gate passes, 2 when an experiment ran but a gate
failed, 1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness, presets
from .errors import ConfigError, MVLabError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvlab", description="McKean-Vlasov numerics laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (YAML-typed value); repeatable")
    run.add_argument("--output", help="override output_dir")
    run.add_argument("--workers", type=int)
    run.add_argument("--seed", type=int)

    sub.add_parser("presets", help="list coefficient presets")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p


def _load(args) -> dict:
    raw = harness.load_config_file(args.config)
    for item in args.overrides:
        key, value = harness.parse_override(item)
        raw[key] = value
    for key in ("output", "workers", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            raw["output_dir" if key == "output" else key] = value
    return raw


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "presets":
            for name, desc in presets.list_presets():
                print(f"{name:32s} {desc}")
            return 0
        cfg = harness.validate_config(_load(args))
        if args.command == "validate":
            print(json.dumps(cfg.values, indent=2, sort_keys=True))
            return 0
        report = harness.run(cfg)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return 1
    except MVLabError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    status = "PASS" if report.passed else "FAIL"
    print(f"{cfg.experiment}: {status}")
    print(json.dumps(report.metrics, indent=2, sort_keys=True, default=str))
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
