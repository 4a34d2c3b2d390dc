"""Experiment configuration: one JSON document per run, validated field by field."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

EXPERIMENTS = (
    "dispersive-scan",
    "strichartz",
    "ballistic-mass",
    "meanfield-error",
    "locality-enhancement",
    "fluctuation-lightcone",
    "astlo-bound",
    "operator-checks",
    "moment-bounds",
)

DEFAULT_THRESHOLDS = {
    "exponent_tol": 0.05,          # decay-slope tolerance
    "enhancement_ratio": 0.1,      # local/global error ceiling inside the cone
    "suppression": 1e-3,           # local fluctuation ceiling inside the cone
    "front_factor": 10.0,          # post-arrival excess over the suppression level
    "stability_factor": 2.0,       # fitted-constant drift ceiling
    "window_stability": 0.05,      # admissible mixed-norm drift under extension
    "constant_cap": 1e3,           # fitted commutator constants must stay below
    "mass_leak": 1e-6,             # supersonic mass outside the enlarged region
}


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


@dataclass
class ExperimentConfig:
    experiment: str
    geometry: dict
    physics: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    seed: int = 0
    output: str | None = None

    def threshold(self, name: str) -> float:
        if name in self.thresholds:
            return float(self.thresholds[name])
        return float(DEFAULT_THRESHOLDS[name])

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "geometry": self.geometry,
            "physics": self.physics,
            "schedule": self.schedule,
            "regions": self.regions,
            "thresholds": self.thresholds,
            "initial": self.initial,
            "seed": self.seed,
        }


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def validate_config(raw: dict) -> ExperimentConfig:
    _require(isinstance(raw, dict), "$", "config must be a JSON object")
    exp = raw.get("experiment")
    _require(exp in EXPERIMENTS, "experiment",
             f"must be one of {', '.join(EXPERIMENTS)}; got {exp!r}")

    geom = raw.get("geometry")
    _require(isinstance(geom, dict), "geometry", "missing geometry block")
    L = geom.get("L")
    _require(isinstance(L, list) and len(L) >= 1 and all(
        isinstance(x, int) and x >= 1 for x in L), "geometry.L",
        "must be a list of positive integers")
    d = geom.get("d", len(L))
    _require(d == len(L), "geometry.d", f"d={d} inconsistent with len(L)={len(L)}")
    boundary = geom.get("boundary", "periodic")
    _require(boundary in ("periodic", "open"), "geometry.boundary",
             "must be 'periodic' or 'open'")

    physics = raw.get("physics", {})
    if "lambda" in physics:
        _require(isinstance(physics["lambda"], (int, float)), "physics.lambda",
                 "must be a number")
    if "N" in physics:
        _require(isinstance(physics["N"], int) and physics["N"] >= 1, "physics.N",
                 "must be a positive integer")

    schedule = raw.get("schedule", {})
    for key in ("T", "dt", "hartree_dt"):
        if key in schedule:
            _require(isinstance(schedule[key], (int, float)) and schedule[key] > 0,
                     f"schedule.{key}", "must be a positive number")
    if "snapshot_stride" in schedule:
        _require(isinstance(schedule["snapshot_stride"], int) and schedule["snapshot_stride"] >= 1,
                 "schedule.snapshot_stride", "must be a positive integer")
    if "order" in schedule:
        _require(schedule["order"] in (2, 4), "schedule.order", "must be 2 or 4")

    regions = raw.get("regions", {})
    for key in ("r", "rho", "R", "v"):
        if key in regions:
            _require(isinstance(regions[key], (int, float)) and regions[key] > 0,
                     f"regions.{key}", "must be a positive number")
    if "n" in regions:
        _require(isinstance(regions["n"], int) and regions["n"] >= 1,
                 "regions.n", "must be a positive integer")

    thresholds = raw.get("thresholds", {})
    for key in thresholds:
        _require(key in DEFAULT_THRESHOLDS, f"thresholds.{key}",
                 f"unknown threshold (known: {', '.join(sorted(DEFAULT_THRESHOLDS))})")

    seed = raw.get("seed", 0)
    _require(isinstance(seed, int), "seed", "must be an integer")

    # geometric feasibility: referenced radii must fit the box with margin
    if regions:
        extent = min(L)
        max_dist = extent / 2 if boundary == "periodic" else extent - 1
        for key in ("R", "r"):
            if key in regions:
                _require(regions[key] <= max_dist, f"regions.{key}",
                         f"radius {regions[key]} exceeds the box half-extent {max_dist}")

    return ExperimentConfig(
        experiment=exp,
        geometry={"d": d, "L": list(L), "boundary": boundary},
        physics=dict(physics),
        schedule=dict(schedule),
        regions=dict(regions),
        thresholds=dict(thresholds),
        initial=dict(raw.get("initial", {})),
        seed=seed,
        output=raw.get("output"),
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"$: not valid JSON ({e})")
    return validate_config(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides to a raw config dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        path, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[parts[-1]] = parsed
    return out
