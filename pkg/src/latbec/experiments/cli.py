"""Command-line entry point: bec run | validate | report."""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, apply_overrides, validate_config
from .runner import run


def _load_raw(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bec",
        description="Desk-scale lattice Bose gas experiments: dispersive decay, "
                    "mean-field accuracy, fluctuation light cones.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to the experiment JSON")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--override", action="append", default=[],
                       metavar="key.path=value", help="override a config field")

    p_val = sub.add_parser("validate", help="check a config without running")
    p_val.add_argument("config")

    p_rep = sub.add_parser("report", help="pretty-print the verdicts of a run")
    p_rep.add_argument("directory")

    args = parser.parse_args(argv)

    if args.command == "validate":
        try:
            cfg = validate_config(_load_raw(args.config))
        except (ConfigError, OSError, json.JSONDecodeError) as e:
            print(f"invalid: {e}", file=sys.stderr)
            return 2
        print(f"ok: {cfg.experiment}")
        return 0

    if args.command == "run":
        try:
            raw = _load_raw(args.config)
            raw = apply_overrides(raw, args.override)
            cfg = validate_config(raw)
        except (ConfigError, OSError, json.JSONDecodeError) as e:
            print(f"invalid config: {e}", file=sys.stderr)
            return 2
        report = run(cfg, out_dir=args.out)
        for v in report.verdicts:
            mark = "PASS" if v.passed else "FAIL"
            tag = " [control]" if v.control else ""
            print(f"{mark}{tag} {v.name}: value={v.value:.6g} bound={v.bound:.6g} {v.note}")
        print(f"overall: {'PASS' if report.passed else 'FAIL'}")
        return 0 if report.passed else 1

    if args.command == "report":
        import os

        path = os.path.join(args.directory, "report.json")
        with open(path) as fh:
            doc = json.load(fh)
        print(f"experiment: {doc['experiment']}  (schema {doc['schema_version']})")
        for v in doc["verdicts"]:
            mark = "PASS" if v["pass"] else "FAIL"
            tag = " [control]" if v.get("control") else ""
            print(f"  {mark}{tag} {v['name']}: value={v['value']:.6g} "
                  f"bound={v['bound']:.6g} {v.get('note', '')}")
        print(f"overall: {'PASS' if doc['pass'] else 'FAIL'}")
        return 0 if doc["pass"] else 1

    return 2


if __name__ == "__main__":
    sys.exit(main())
