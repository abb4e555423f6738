"""Planar robot that must stay inside a disk while driven toward an outside
goal, and a bare Wiener-path scenario for level-crossing checks."""

from __future__ import annotations

import math

import numpy as np

from ..barrier import BarrierSpec, check_derivatives
from ..filters import CbfFilter, RacbfRule, ScbfRule
from ..models import robot_nominal, single_integrator_model
from ..risk import racbf_min_risk, scbf_risk_bound_with_branch, wiener_sup_law
from ..sde import FeedbackController, SdeModel
from .barriers import robot_barrier
from .base import Check, LaneSetup, Scenario, filtered, parse_rule
from .config import ConfigError


class RobotScenario(Scenario):
    kind = "robot"

    def __init__(self, config: dict, verify: bool = True):
        super().__init__(config)
        model = config["model"]
        self.radius = float(model.get("radius", 1.0))
        self.goal = np.asarray(model.get("goal", [2.0, 2.0]), dtype=float)
        self.goal_radius = float(model.get("goal_radius", 0.25))
        self.v_max = float(model.get("v_max", 10.0))
        self.x0 = np.asarray(model.get("x0", [1.0 / math.sqrt(2.0), 0.0]), dtype=float)
        if self.x0.shape != (2,) or self.goal.shape != (2,):
            raise ConfigError("robot x0 and goal must be 2-vectors")
        if np.linalg.norm(self.goal) - self.goal_radius <= self.radius:
            raise ConfigError("goal region intersects the safe disk")
        noise = config.get("noise", {})
        if "sigma" in noise:
            self.sigma = float(noise["sigma"])
        else:
            self.sigma = float(noise.get("scale", 0.3)) * self.v_max * float(noise.get("dt", self.dt))
        self.k = float(config.get("nominal", {}).get("k", 1.0))
        if self.k <= 0:
            raise ConfigError("nominal gain k must be positive")

        if len(config["barriers"]) != 1 or config["barriers"][0]["kind"] != "disk":
            raise ConfigError("robot scenario takes exactly one 'disk' barrier")
        spec = config["barriers"][0]
        self.gamma = float(np.sum(self.x0 ** 2) / self.radius ** 2)
        if "gamma" in spec and abs(float(spec["gamma"]) - self.gamma) > 1e-12:
            raise ConfigError(f"configured gamma {spec['gamma']} does not match B(x0) = {self.gamma!r}")
        if self.gamma >= 1.0:
            raise ConfigError("x0 lies outside the safe disk")
        self.barrier = robot_barrier(self.radius, self.gamma)
        self.rule = parse_rule(spec.get("filter"), self.T, 1, "barriers[0]")
        self.filter_spec = spec.get("filter")
        self.model = single_integrator_model(self.sigma, self.sigma)
        self.barrier_names = [self.barrier.name]
        fb = filtered(self.barrier, self.rule, self.filter_spec)
        if fb is not None:
            fb.check_admissible()

    def _nominal(self, t, X):
        return robot_nominal(X, self.goal, self.k, self.v_max)

    def setup(self, seeds) -> LaneSetup:
        N = len(seeds)
        x0 = np.tile(self.x0, (N, 1))
        fb = filtered(self.barrier, self.rule, self.filter_spec)
        box = np.full(2, self.v_max)
        if fb is None:
            ctrl = FeedbackController(self._nominal, 2)
        else:
            ctrl = CbfFilter(self.model, [fb], self._nominal, -box, box)
        return LaneSetup(self.model, ctrl, [self.barrier], x0)

    def theory(self) -> dict:
        out = {"gamma": self.gamma, "sigma": self.sigma, "eta": 2.0 * self.sigma / self.radius, "T": self.T}
        if isinstance(self.rule, ScbfRule):
            bound, branch = scbf_risk_bound_with_branch(self.rule.alpha, self.rule.beta, self.gamma, self.T)
            out.update(filter="scbf", alpha=self.rule.alpha, beta=self.rule.beta,
                       predicted_rho=bound, branch=branch)
        elif isinstance(self.rule, RacbfRule):
            out.update(filter="racbf", eta=self.rule.etas[0], rho_d=self.rule.rho_ds[0],
                       predicted_rho=self.rule.rho_ds[0], k_alpha=self.rule.k_alpha,
                       min_rho=racbf_min_risk(self.gamma, self.rule.etas[0], self.T))
        return out

    def checks(self) -> list[Check]:
        pts = np.random.default_rng(0).uniform(-self.radius, self.radius, (64, 2))
        rep = check_derivatives(self.barrier, pts)
        out = [Check("scenarios", "disk barrier derivatives", rep.ok,
                     f"grad err {rep.gradient_error:.2e}, hess err {rep.hessian_error:.2e}")]
        out.append(Check("scenarios", "gamma from x0", True, f"B(x0) = {self.gamma!r}"))
        if isinstance(self.rule, RacbfRule):
            lo = racbf_min_risk(self.gamma, self.rule.etas[0], self.T)
            out.append(Check("risk-engine", "rho_d admissible", self.rule.rho_ds[0] >= lo,
                             f"rho_d = {self.rule.rho_ds[0]}, minimum {lo:.6g}"))
        return out

    def eta_levels(self):
        return {self.barrier.name: self.barrier.levels[1:]}


class WienerScenario(Scenario):
    """Unit Brownian motion from 0 monitored against the level ``a``
    (``B = x / a``); exit probability should match ``1 - erf(a / sqrt(2T))``."""

    kind = "wiener"

    def __init__(self, config: dict, verify: bool = True):
        super().__init__(config)
        self.a = float(config["model"].get("a", 1.0))
        if self.a <= 0:
            raise ConfigError("crossing level a must be positive")
        self.exit_test = str(config["mc"].get("exit_test", "bridge"))
        a = self.a

        def drift(x):
            return np.zeros_like(x)

        def control(x):
            return np.zeros((x.shape[0], 1, 1))

        def diffusion(x):
            return np.ones((x.shape[0], 1, 1))

        self.model = SdeModel(1, 1, 1, drift, control, diffusion, name="wiener")
        self.barrier = BarrierSpec(
            "level", lambda X: X[:, 0] / a, lambda X: np.full((X.shape[0], 1), 1.0 / a),
            lambda X: np.zeros((X.shape[0], 1, 1)),
        )
        self.barrier_names = ["level"]

    def setup(self, seeds) -> LaneSetup:
        N = len(seeds)
        ctrl = FeedbackController(lambda t, X: np.zeros((X.shape[0], 1)), 1)
        return LaneSetup(self.model, ctrl, [self.barrier], np.zeros((N, 1)))

    def theory(self) -> dict:
        stay = wiener_sup_law(self.a, self.T)
        return {"a": self.a, "T": self.T, "stay_probability": stay, "predicted_rho": 1.0 - stay}
