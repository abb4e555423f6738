"""Experiment definitions: robot in a disk, bare Wiener paths, highway merge."""

from __future__ import annotations

from pathlib import Path

from .barriers import RoadGeometry, collision_barrier, road_barrier, robot_barrier
from .base import Check, LaneSetup, Scenario
from .config import BUNDLED, ConfigError, apply_overrides, bundled_path, dump_config, load_config
from .merge import MergeScenario
from .robot import RobotScenario, WienerScenario

KINDS = {cls.kind: cls for cls in (RobotScenario, WienerScenario, MergeScenario)}


def build_scenario(source: dict | str | Path, overrides=()) -> Scenario:
    """Load, override and validate a config, then build its scenario.

    Build-time checks (gamma consistency, rho_d admissibility, placement,
    composite budget, nominal conflict) raise here rather than mid-run.
    """
    cfg = load_config(source)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    kind = cfg["scenario"].get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {sorted(KINDS)}")
    return KINDS[kind](cfg)


__all__ = [
    "BUNDLED", "Check", "ConfigError", "KINDS", "LaneSetup", "MergeScenario", "RoadGeometry", "RobotScenario",
    "Scenario", "WienerScenario", "apply_overrides", "build_scenario", "bundled_path", "collision_barrier",
    "dump_config", "load_config", "road_barrier", "robot_barrier",
]
