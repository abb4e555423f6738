"""Common scenario interface used by the Monte Carlo harness and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..barrier import BarrierSpec
from ..filters import FilteredBarrier, RacbfRule, ScbfRule
from ..sde import Controller, LaneOutcome, SdeModel
from .config import ConfigError


@dataclass
class LaneSetup:
    """Everything needed to advance one chunk of lanes."""

    model: SdeModel
    controller: Controller
    monitored: list[BarrierSpec]
    x0: np.ndarray
    context: dict = field(default_factory=dict)


@dataclass
class Check:
    module: str
    name: str
    ok: bool
    detail: str = ""


class Scenario:
    """Immutable description of an experiment; lanes are built per chunk."""

    kind = "base"
    exit_test = "grid"

    def __init__(self, config: dict, verify: bool = True):
        self.config = config
        mc = config["mc"]
        self.name = str(config.get("scenario", {}).get("name", self.kind))
        self.T = float(mc["T"])
        self.dt = float(mc["dt"])
        self.N = int(mc["N"])
        self.base_seed = int(mc["base_seed"])
        self.chunk = int(mc.get("chunk", 1000))
        if self.T <= 0 or self.dt <= 0:
            raise ConfigError("mc.T and mc.dt must be positive")
        if self.chunk < 1:
            raise ConfigError("mc.chunk must be at least 1")

    # subclasses fill these in
    barrier_names: list[str] = []

    def setup(self, seeds) -> LaneSetup:
        raise NotImplementedError

    def classify(self, outcome: LaneOutcome, setup: LaneSetup) -> list[str] | None:
        return None

    def theory(self) -> dict[str, Any]:
        return {}

    def checks(self) -> list[Check]:
        return []

    def eta_levels(self) -> dict[str, tuple[float, ...]]:
        """Level boundaries ``mu_1 < ... < mu_k`` per monitored barrier."""
        return {}


def parse_rule(spec: dict | None, T: float, n_levels: int, where: str):
    """Filter rule from a barrier's ``filter`` section (None means unfiltered)."""
    if spec is None:
        return None
    kind = spec.get("type")
    try:
        if kind == "scbf":
            return ScbfRule(float(spec["alpha"]), float(spec["beta"]))
        if kind == "racbf":
            etas = tuple(float(e) for e in np.atleast_1d(spec["eta"]))
            rhos = tuple(float(r) for r in np.atleast_1d(spec["rho_d"]))
            if len(etas) != n_levels or len(rhos) != n_levels:
                raise ConfigError(f"{where}: need {n_levels} eta and rho_d values, "
                                  f"got {len(etas)} and {len(rhos)}")
            return RacbfRule(etas, rhos, float(spec.get("T", T)), float(spec.get("k_alpha", 1.0)))
    except KeyError as exc:
        raise ConfigError(f"{where}: filter is missing {exc}") from None
    raise ConfigError(f"{where}: unknown filter type {kind!r}")


def filtered(barrier: BarrierSpec, rule, spec: dict | None) -> FilteredBarrier | None:
    if rule is None:
        return None
    return FilteredBarrier(barrier, rule, soft=bool((spec or {}).get("soft", False)))
