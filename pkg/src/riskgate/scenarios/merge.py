"""Highway on-ramp merge: one filtered ego vehicle and ten IDM-driven highway
vehicles, all following the stochastic kinematic bicycle."""

from __future__ import annotations

import math

import numpy as np

from ..barrier import BarrierSpec, check_derivatives
from ..filters import CbfFilter, FilteredBarrier, RacbfRule
from ..models import (
    BETA, PSI, V, X, Y, IdmParams, LqrGains, bicycle_drift, clamp_slip_rate, drag_noise, idm_accel,
    vehicle_nominal,
)
from ..risk import AdmissibilityError, CascadeSpec, min_risk_for_gap
from ..sde import FeedbackController, SdeModel, simulate_lanes, substream
from .barriers import RoadGeometry, collision_barrier, road_barrier
from .base import Check, LaneSetup, Scenario, parse_rule
from .config import ConfigError

DIM = 5


class MergeTraffic:
    """Per-chunk traffic parameters (highway vehicles' IDM time gaps)."""

    def __init__(self, scenario: "MergeScenario", time_gaps: np.ndarray, see_ego: bool = True):
        self.sc = scenario
        self.time_gaps = time_gaps  # (N, n_hw)
        self.see_ego = see_ego

    def highway_controls(self, Z: np.ndarray) -> np.ndarray:
        """IDM acceleration and lane-keeping slip rate for every highway
        vehicle; returns (N, n_hw, 2)."""
        sc = self.sc
        N = Z.shape[0]
        veh = Z.reshape(N, sc.n_vehicles, DIM)
        x, y, v = veh[:, :, X], veh[:, :, Y], veh[:, :, V]
        hw = slice(1, sc.n_vehicles)
        # leader: nearest vehicle ahead whose lateral offset is within half a lane
        dx = x[:, None, :] - x[:, hw, None]  # (N, n_hw, n_vehicles)
        same = np.abs(y[:, None, :] - y[:, hw, None]) < 0.5 * sc.lane_width
        ahead = same & (dx > 0)
        if not self.see_ego:
            ahead[:, :, 0] = False
        gap = np.where(ahead, dx - sc.car_length, np.inf)
        lead = np.argmin(gap, axis=2)
        gap_min = np.take_along_axis(gap, lead[:, :, None], axis=2)[:, :, 0]
        v_lead = np.take_along_axis(v, lead, axis=1)
        v_lead = np.where(np.isfinite(gap_min), v_lead, v[:, hw])
        gap_min = np.where(np.isfinite(gap_min), np.maximum(gap_min, sc.min_idm_gap), np.inf)
        a = idm_accel(v[:, hw], v_lead, gap_min, sc.idm, time_gap=self.time_gaps, check=False)
        u = vehicle_nominal(veh[:, hw, :], sc.highway_lanes[None, :], sc.v_d, sc.gains,
                            sc.a_bar, sc.omega_bar)
        return np.stack([a, u[..., 1]], axis=-1)

    def model(self) -> SdeModel:
        sc = self.sc
        n = sc.n_vehicles * DIM
        G = np.zeros((n, 2))
        G[V, 0] = 1.0
        G[BETA, 1] = 1.0
        S = np.zeros((n, 2 * sc.n_vehicles))
        for j in range(sc.n_vehicles):
            S[DIM * j + V, 2 * j] = sc.sigma_a
            S[DIM * j + BETA, 2 * j + 1] = sc.sigma_omega

        def drift(Z):
            N = Z.shape[0]
            veh = Z.reshape(N, sc.n_vehicles, DIM)
            f = bicycle_drift(veh, sc.l_r)
            u = self.highway_controls(Z)
            f[:, 1:, V] += u[..., 0]
            f[:, 1:, BETA] += u[..., 1]
            return f.reshape(N, n)

        def control_matrix(Z):
            return np.broadcast_to(G, (Z.shape[0], n, 2))

        def diffusion(Z):
            return np.broadcast_to(S, (Z.shape[0], n, S.shape[1]))

        return SdeModel(n, 2, S.shape[1], drift, control_matrix, diffusion, name="merge")


class MergeScenario(Scenario):
    kind = "merge"

    def __init__(self, config: dict, verify: bool = True):
        super().__init__(config)
        m = config["model"]
        self.n_highway = int(m.get("n_highway", 10))
        self.n_vehicles = self.n_highway + 1
        self.l_f = float(m.get("l_f", 1.5))
        self.l_r = float(m.get("l_r", 1.5))
        self.car_length = float(m.get("car_length", self.l_f + self.l_r))
        self.lane_width = float(m.get("lane_width", 3.0))
        lanes = [float(v) for v in m.get("lanes", [0.0, 3.0])]
        self.merge_lane = lanes[0]
        self.highway_lanes = np.array([lanes[i % 2] for i in range(1, self.n_vehicles)])
        self.theta = math.radians(float(m.get("ramp_angle_deg", 3.0)))
        self.x_j = float(m.get("junction_x", 0.0))
        self.ramp_distance = float(m.get("ramp_distance", 98.75))
        self.spacing = float(m.get("spacing", 15.0))
        self.conflict = int(m.get("conflict_vehicle", 2))
        self.conflict_x0 = float(m["conflict_x0"])
        self.ego_speed = tuple(float(v) for v in m.get("ego_speed", [24.0, 26.0]))
        self.highway_speed = tuple(float(v) for v in m.get("highway_speed", [29.0, 31.0]))
        self.a_bar = float(m.get("a_bar", 2.0))
        self.omega_bar = float(m.get("omega_bar", math.pi / 16))
        self.min_idm_gap = float(m.get("min_idm_gap", 0.1))
        idm = dict(m.get("idm", {}))
        self.time_gap_range = tuple(float(v) for v in idm.pop("time_gap", [0.25, 0.75]))
        self.idm = IdmParams(time_gap=float(np.mean(self.time_gap_range)), **idm)
        if not 1 <= self.conflict <= self.n_highway:
            raise ConfigError("conflict_vehicle must index a highway vehicle")

        noise = config.get("noise", {})
        self.sigma_a, self.sigma_omega = drag_noise(float(noise.get("v_bar", 35.0)), float(noise.get("dt", self.dt)),
                                                    self.a_bar, self.omega_bar)
        nominal = config.get("nominal", {})
        self.v_d = float(nominal.get("v_d", 30.0))
        Q = np.diag(nominal.get("Q", [1.0, 1.0, 1.0, 1.0]))
        R = np.diag(nominal.get("R", [1.0, 1.0]))
        self.gains = LqrGains.from_riccati(self.v_d, self.l_r, float(nominal.get("lqr_dt", 0.01)), Q, R)
        self.ramp = RoadGeometry(self.theta, self.lane_width, self.merge_lane, self.x_j)

        cascade = config.get("cascade") or {}
        self.levels = tuple(float(v) for v in cascade.get("levels", [1.0]))
        CascadeSpec((0.0, *self.levels), (0.0,) * len(self.levels), self.T)  # ordering and endpoint checks
        self.classifier = dict(config.get("scenario", {}).get("classifier", {}))
        self.lane_tol = float(self.classifier.get("lane_tol", 0.5))
        self.budget = config.get("scenario", {}).get("budget", {})

        self._build_barriers(config["barriers"])
        self.barrier_names = [b.name for b in self.barriers]
        self._check_placement()
        self._check_budgets()
        if verify and m.get("check_conflict", True):
            gap = self.nominal_conflict_gap()
            if not gap < self.d_min:
                raise ConfigError(
                    f"nominal-collision check failed: deterministic ego/vehicle {self.conflict} "
                    f"minimum distance {gap:.3f} m is not below d_min = {self.d_min}")

    # ------------------------------------------------------------------ build

    def _barrier_levels(self, gamma: float) -> tuple[float, ...]:
        inner = [mu for mu in self.levels if mu > gamma]
        return (gamma, *inner)

    def _build_barriers(self, specs: list[dict]) -> None:
        x0 = self.mean_initial_state()[None, :]
        self.barriers: list[BarrierSpec] = []
        self.rules: list = []
        self.soft: list[bool] = []
        self.d_min = None
        for i, spec in enumerate(specs):
            kind = spec["kind"]
            if kind == "road":
                proto = [road_barrier(self.theta, self.lane_width, self.merge_lane, self.x_j,
                                      tuple(spec.get("previews", [0.0, 1.0])), offset=0,
                                      noise_support=(0, 1), name=spec.get("name", "road"))]
            elif kind == "collision":
                self.d_min = float(spec.get("d_min", 2.5))
                proto = [collision_barrier(0, DIM * j, self.d_min, float(spec.get("horizon", 5.0)),
                                           float(spec.get("relax", 0.1)),
                                           noise_support=(0, 1, 2 * j, 2 * j + 1),
                                           name=f"{spec.get('name', 'collision')}_{j}")
                         for j in range(1, self.n_vehicles)]
            else:
                raise ConfigError(f"barriers[{i}]: unknown kind {kind!r} for the merge scenario")
            for b in proto:
                gamma = float(b.value(x0)[0])
                if gamma >= self.levels[0]:
                    raise ConfigError(f"{b.name}: initial B = {gamma:.4g} is not below the first level")
                bb = b.with_levels(gamma, self._barrier_levels(gamma))
                self.barriers.append(bb)
                self.rules.append(parse_rule(spec.get("filter"), self.T, len(self.levels), f"barriers[{i}]"))
                self.soft.append(bool((spec.get("filter") or {}).get("soft", False)))
        if self.d_min is None:
            self.d_min = 2.5
        for b, rule in zip(self.barriers, self.rules):
            if rule is not None:
                FilteredBarrier(b, rule).check_admissible()

    def _check_placement(self) -> None:
        x0 = self.mean_initial_state().reshape(self.n_vehicles, DIM)
        p = x0[:, :2]
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2) + np.eye(self.n_vehicles) * 1e9
        if d.min() <= self.car_length:
            i, j = np.unravel_index(np.argmin(d), d.shape)
            raise ConfigError(f"initial placement overlaps: vehicles {i} and {j} are {d.min():.2f} m apart")

    def survival_budget(self) -> dict:
        """Composite safety probability implied by the per-level rho_d."""
        per_barrier = []
        for b, rule in zip(self.barriers, self.rules):
            if isinstance(rule, RacbfRule):
                per_barrier.append((b.name, 1.0 - float(np.prod(rule.rho_ds))))
        road = float(np.prod([s for n, s in per_barrier if not n.startswith("collision")]))
        coll = float(np.prod([s for n, s in per_barrier if n.startswith("collision")]))
        return {"road_survival": road, "collision_survival": coll, "total_survival": road * coll}

    def _check_budgets(self) -> None:
        target = self.budget.get("target_survival")
        if target is None:
            return
        got = self.survival_budget()["total_survival"]
        if got < float(target) - 1e-12:
            raise AdmissibilityError(f"composite survival {got:.6f} is below the target {target}")

    # ---------------------------------------------------------- initial state

    def _ego_start(self, v: float) -> np.ndarray:
        d = self.ramp_distance
        return np.array([self.x_j - d * math.cos(self.theta), self.merge_lane - d * math.sin(self.theta),
                         self.theta, v, 0.0])

    def _highway_start(self, i: int, v: float) -> np.ndarray:
        x = self.conflict_x0 + self.spacing * (self.conflict - i)
        return np.array([x, self.highway_lanes[i - 1], 0.0, v, 0.0])

    def mean_initial_state(self) -> np.ndarray:
        z = [self._ego_start(float(np.mean(self.ego_speed)))]
        z += [self._highway_start(i, float(np.mean(self.highway_speed))) for i in range(1, self.n_vehicles)]
        return np.concatenate(z)

    def sample_lanes(self, seeds):
        N = len(seeds)
        X0 = np.empty((N, self.n_vehicles * DIM))
        gaps = np.empty((N, self.n_highway))
        for k, seed in enumerate(seeds):
            rng = substream(int(seed), 1)
            v_e = rng.uniform(*self.ego_speed)
            v_h = rng.uniform(*self.highway_speed, size=self.n_highway)
            gaps[k] = rng.uniform(*self.time_gap_range, size=self.n_highway)
            z = [self._ego_start(v_e)] + [self._highway_start(i, v_h[i - 1]) for i in range(1, self.n_vehicles)]
            X0[k] = np.concatenate(z)
        return X0, gaps

    # ------------------------------------------------------------- controllers

    def ego_nominal(self, t, Z):
        ego = Z[:, :DIM]
        y_d = self.ramp.centerline(ego[:, X])
        psi_d = np.where(ego[:, X] < self.x_j, self.theta, 0.0)
        return vehicle_nominal(ego, y_d, self.v_d, self.gains, self.a_bar, self.omega_bar, psi_d)

    def _ego_filtered(self, t, Z):
        return self.ego_nominal(t, Z)

    def setup(self, seeds, filtered: bool = True) -> LaneSetup:
        X0, gaps = self.sample_lanes(seeds)
        traffic = MergeTraffic(self, gaps)
        model = traffic.model()
        box = np.array([self.a_bar, self.omega_bar])
        fbs = [FilteredBarrier(b, r, s) for b, r, s in zip(self.barriers, self.rules, self.soft) if r is not None]
        if filtered and fbs:
            ctrl = CbfFilter(model, fbs, self.ego_nominal, -box, box,
                             slack_weight=float(self.config.get("nominal", {}).get("slack_weight", 1e4)))
        else:
            ctrl = FeedbackController(self.ego_nominal, 2)
        return LaneSetup(model, ctrl, list(self.barriers), X0, {"traffic": traffic, "time_gaps": gaps})

    # ---------------------------------------------------------------- checks

    def nominal_conflict_gap(self) -> float:
        """Minimum ego / conflict-vehicle distance over a noise-free rollout
        from the mean initial state with the unfiltered ego law, highway
        traffic not reacting to the ego (the paths the two plans would take)."""
        X0 = self.mean_initial_state()[None, :]
        gaps = np.full((1, self.n_highway), float(np.mean(self.time_gap_range)))
        traffic = MergeTraffic(self, gaps, see_ego=False)
        model = traffic.model()
        quiet = SdeModel(model.n, model.m, model.q, model.drift, model.control_matrix,
                         lambda Z: np.zeros((Z.shape[0], model.n, model.q)), name="merge_noise_free")
        ctrl = FeedbackController(self.ego_nominal, 2)
        j = DIM * self.conflict
        best = [np.inf]

        def watch(k, t, Z, active):
            best[0] = min(best[0], float(np.hypot(*(Z[0, j:j + 2] - Z[0, :2]))))

        simulate_lanes(quiet, ctrl, [], X0, self.T, self.dt, [0], observers=[watch])
        return best[0]

    def checks(self) -> list[Check]:
        out = []
        rng = np.random.default_rng(0)
        base = self.mean_initial_state()
        pts = base + rng.normal(0.0, 1.0, (32, base.size)) * np.tile([2.0, 0.3, 0.02, 1.0, 0.01], self.n_vehicles)
        for b in (self.barriers[0], self.barriers[min(self.conflict, len(self.barriers) - 1)]):
            rep = check_derivatives(_margin_view(b), pts, step=1e-6, tol=1e-5)
            out.append(Check("scenarios", f"{b.name} derivatives", rep.ok,
                             f"grad err {rep.gradient_error:.2e}, hess err {rep.hessian_error:.2e}"))
        for b, rule in zip(self.barriers, self.rules):
            if isinstance(rule, RacbfRule):
                try:
                    FilteredBarrier(b, rule).check_admissible()
                    out.append(Check("risk-engine", f"{b.name} rho_d admissible", True))
                except AdmissibilityError as exc:
                    out.append(Check("risk-engine", f"{b.name} rho_d admissible", False, str(exc)))
        bud = self.survival_budget()
        target = self.budget.get("target_survival")
        if target is not None:
            out.append(Check("scenarios", "composite survival", bud["total_survival"] >= target - 1e-12,
                             f"{bud['total_survival']:.6f} vs target {target}"))
        gap = self.nominal_conflict_gap()
        out.append(Check("scenarios", "nominal conflict with vehicle %d" % self.conflict, gap < self.d_min,
                         f"min distance {gap:.3f} m, d_min {self.d_min}"))
        return out

    # ---------------------------------------------------------------- results

    def classify(self, outcome, setup: LaneSetup) -> list[str]:
        Z = outcome.final_state
        ego_x, ego_y = Z[:, X], Z[:, Y]
        x_c = Z[:, DIM * self.conflict + X]
        tags = []
        for k in range(Z.shape[0]):
            if outcome.stopped[k]:
                tags.append("unsafe")
            elif abs(ego_y[k] - self.merge_lane) < self.lane_tol:
                tags.append("merged_behind" if ego_x[k] < x_c[k] else "merged_ahead")
            else:
                tags.append("not_merged")
        return tags

    def theory(self) -> dict:
        out = {"T": self.T, "sigma_a": self.sigma_a, "sigma_omega": self.sigma_omega,
               "gamma": {b.name: b.gamma for b in self.barriers}}
        out.update(self.survival_budget())
        out["predicted_rho"] = 1.0 - out["total_survival"]
        per_level = {}
        for b, rule in zip(self.barriers[:2], self.rules[:2]):
            if isinstance(rule, RacbfRule):
                gaps = np.diff(b.levels)
                per_level[b.name] = [min_risk_for_gap(g, e, rule.T) for g, e in zip(gaps, rule.etas)]
        out["min_rho_per_level"] = per_level
        return out

    def eta_levels(self):
        return {b.name: tuple(self.levels) for b in self.barriers}


def _margin_view(b: BarrierSpec) -> BarrierSpec:
    """The barrier's ``h = -log B`` for derivative checks (B itself is tiny
    far from conflicts, which would make a mixed-error check vacuous)."""
    jet = b.jet

    def parts(Z):
        B, g, H = jet(Z)
        gh = -g / B[:, None]
        Hh = -H / B[:, None, None] + gh[:, :, None] * gh[:, None, :]
        return -np.log(B), gh, Hh

    return BarrierSpec(b.name + "_margin", lambda Z: parts(Z)[0], lambda Z: parts(Z)[1],
                       lambda Z: parts(Z)[2], support=b.support)
