"""Deterministic report emission: schema-versioned JSON plus CSV series.

The report JSON carries no timestamps or wall-clock data, so identical config
and seed produce byte-identical files; timing lands in a sidecar run_meta.json
that is excluded from determinism guarantees.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

SCHEMA_VERSION = 1


def _round_trip(value):
    """Plain-python, JSON-stable copy of numpy scalars and arrays."""
    import numpy as np

    if isinstance(value, dict):
        return {k: _round_trip(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_trip(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_round_trip(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


@dataclass
class Verdict:
    name: str
    value: float
    bound: float
    passed: bool
    kind: str = "upper"        # value <= bound ("upper") or >= ("lower")
    control: bool = False      # control rows are reported, never asserted
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": _round_trip(self.value),
            "bound": _round_trip(self.bound),
            "kind": self.kind,
            "pass": bool(self.passed),
            "control": bool(self.control),
            "note": self.note,
        }


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    verdicts: list[Verdict] = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    series_files: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, verdict: Verdict):
        self.verdicts.append(verdict)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts if not v.control)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "config": _round_trip(self.config),
            "fits": _round_trip(self.fits),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "series": self.series_files,
            "notes": self.notes,
            "pass": self.passed,
            "provenance": {"package": "latbec", "version": "0.1.0",
                           "seed": self.config.get("seed", 0)},
        }


def write_csv(directory, name: str, columns: list[str], rows) -> str:
    os.makedirs(directory, exist_ok=True)
    fname = f"{name}.csv"
    with open(os.path.join(directory, fname), "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (int, float)) or hasattr(v, "item")
                              else str(v) for v in row) + "\n")
    return fname


def write_report(directory, report: ExperimentReport, wall_seconds: float | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if wall_seconds is not None:
        with open(os.path.join(directory, "run_meta.json"), "w") as fh:
            json.dump({"wall_seconds": wall_seconds}, fh, indent=2)
            fh.write("\n")
    return path
