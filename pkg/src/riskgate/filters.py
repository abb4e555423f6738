"""CBF safety filters: constraint-row assembly for stochastic (S-CBF) and
risk-aware (RA-CBF) conditions, the running generator integral ``I_L`` with
occupied-level tracking, and a batched CBF-QP controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import qp
from .barrier import BarrierSpec, decompose
from .risk import AdmissibilityError, erfc_inv, min_risk_for_gap
from .sde import SdeModel, as_lanes


@dataclass(frozen=True)
class ConstraintRow:
    """``A u + b + c delta <= 0``."""

    A: np.ndarray
    b: float
    c: float = 0.0

    def residual(self, u, delta: float = 0.0) -> float:
        return float(np.dot(self.A, u) + self.b + self.c * delta)


@dataclass(frozen=True)
class ScbfRule:
    """``Gamma_B <= -alpha B + beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("S-CBF needs alpha >= 0 and beta >= 0")


@dataclass(frozen=True)
class RacbfRule:
    """``Gamma_B <= k_alpha h(I_L)`` with one ``(eta, rho_d)`` pair per level.

    A single pair means single-level mode (gap ``1 - gamma``); otherwise the
    pairs follow the barrier's ascending level boundaries.
    """

    etas: tuple[float, ...]
    rho_ds: tuple[float, ...]
    T: float
    k_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "etas", tuple(float(e) for e in np.atleast_1d(self.etas)))
        object.__setattr__(self, "rho_ds", tuple(float(r) for r in np.atleast_1d(self.rho_ds)))
        if len(self.etas) != len(self.rho_ds) or not self.etas:
            raise ValueError("need one rho_d per eta")
        if any(e < 0 for e in self.etas):
            raise ValueError("eta must be nonnegative")
        if any(not 0.0 < r < 1.0 for r in self.rho_ds):
            raise AdmissibilityError("rho_d must lie strictly inside (0, 1)")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.k_alpha <= 0:
            raise ValueError("class-K gain must be positive")

    @property
    def budgets(self) -> np.ndarray:
        """``sqrt(2) eta_i T erfinv(1 - rho_d,i)`` per level."""
        return np.array([math.sqrt(2.0) * e * self.T * erfc_inv(r) for e, r in zip(self.etas, self.rho_ds)])


@dataclass(frozen=True)
class FilteredBarrier:
    barrier: BarrierSpec
    rule: ScbfRule | RacbfRule
    soft: bool = False

    def __post_init__(self):
        if isinstance(self.rule, RacbfRule):
            k = len(self.barrier.levels) - 1
            if len(self.rule.etas) != k:
                raise ValueError(
                    f"{self.barrier.name}: {len(self.rule.etas)} (eta, rho_d) pairs for {k} levels")

    def level_gaps(self, gamma: float | None = None) -> np.ndarray:
        lv = np.array(self.barrier.levels, dtype=float)
        if gamma is not None:
            lv[0] = gamma
        return np.diff(lv)

    def check_admissible(self, gamma: float | None = None) -> None:
        """Every level's rho_d must be at least its minimum specifiable risk."""
        if not isinstance(self.rule, RacbfRule):
            return
        g0 = self.barrier.gamma if gamma is None else gamma
        first = int(self.barrier.level_index(np.array([g0]))[0])
        gaps = self.level_gaps(g0)
        for i, (gap, eta, rho) in enumerate(zip(gaps, self.rule.etas, self.rule.rho_ds), start=1):
            if i < first:
                continue
            if i == first:
                gap = self.barrier.levels[i] - g0
            lo = min_risk_for_gap(gap, eta, self.rule.T)
            if rho < lo * (1.0 - 1e-12):
                raise AdmissibilityError(
                    f"{self.barrier.name} level {i}: rho_d = {rho} below the minimum "
                    f"specifiable risk {lo:.6g} (gap {gap:.6g}, eta {eta}, T {self.rule.T})")


# ----------------------------------------------------------------------------
# single-state row assembly
# ----------------------------------------------------------------------------


def _split(model: SdeModel, barrier: BarrierSpec, x):
    X, _ = as_lanes(x, model.n)
    f, g, s = model.evaluate(X)
    drift, row, _ = decompose(barrier, X, f, g, s)
    return X, drift, row


def assemble_scbf_row(model: SdeModel, barrier: BarrierSpec, x, alpha: float, beta: float,
                      soft: bool = False) -> ConstraintRow:
    """Row equivalent to ``Gamma_B(x, u) <= -alpha B(x) + beta``."""
    ScbfRule(alpha, beta)
    X, drift, row = _split(model, barrier, x)
    b = drift[0] + alpha * barrier.value(X)[0] - beta
    return ConstraintRow(row[0].copy(), float(b), -1.0 if soft else 0.0)


@dataclass
class RacbfControllerState:
    """Per-trial RA-CBF bookkeeping for a set of barriers (one column each)."""

    I_L: np.ndarray  # (N, nb)
    level: np.ndarray  # (N, nb) occupied level, 1-based
    gap: np.ndarray  # (N, nb) gap of the occupied level
    entry_time: np.ndarray  # (N, nb)
    entry_I: np.ndarray  # (N, nb) I_L just before the last level change
    gamma: np.ndarray  # (N, nb) B(x0)
    level_changes: np.ndarray  # (N, nb) count

    @classmethod
    def start(cls, barriers: Sequence[BarrierSpec], x0) -> "RacbfControllerState":
        X = np.atleast_2d(np.asarray(x0, dtype=float))
        N, nb = X.shape[0], len(barriers)
        gamma = np.column_stack([b.value(X) for b in barriers]) if nb else np.zeros((N, 0))
        level = np.column_stack([b.level_index(gamma[:, j]) for j, b in enumerate(barriers)]) if nb \
            else np.zeros((N, 0), dtype=int)
        gap = np.zeros((N, nb))
        for j, b in enumerate(barriers):
            upper = np.asarray(b.levels)[np.minimum(level[:, j], len(b.levels) - 1)]
            gap[:, j] = upper - gamma[:, j]
        z = np.zeros((N, nb))
        return cls(z.copy(), level, gap, z.copy(), z.copy(), gamma, np.zeros((N, nb), dtype=np.int64))


def _level_gap(barrier: BarrierSpec, level: np.ndarray) -> np.ndarray:
    lv = np.asarray(barrier.levels)
    i = np.clip(level, 1, len(lv) - 1)
    return lv[i] - lv[i - 1]


def racbf_h_values(rule: RacbfRule, level: np.ndarray, gap: np.ndarray, I_L: np.ndarray) -> np.ndarray:
    """``h(I_L) = gap - sqrt(2) eta_i T erfinv(1 - rho_d,i) - I_L`` for the occupied level."""
    budgets = rule.budgets
    i = np.clip(level, 1, len(budgets)) - 1
    return gap - budgets[i] - I_L


def assemble_racbf_row(model: SdeModel, barrier: BarrierSpec, x, state: RacbfControllerState,
                       rule: RacbfRule, column: int = 0, soft: bool = False) -> ConstraintRow:
    """Row equivalent to ``Gamma_B(x, u) <= k_alpha h(I_L)`` for lane 0 of ``state``."""
    X, drift, row = _split(model, barrier, x)
    h = racbf_h_values(rule, state.level[:1, column], state.gap[:1, column], state.I_L[:1, column])[0]
    b = drift[0] - rule.k_alpha * h
    return ConstraintRow(row[0].copy(), float(b), -1.0 if soft else 0.0)


def update_integrator(state: RacbfControllerState, model: SdeModel, barrier: BarrierSpec, x, u_applied,
                      dt: float, column: int = 0) -> RacbfControllerState:
    """Left-endpoint update ``I_L += Gamma_B(x, u) dt`` for one barrier column.
    Level changes are handled by :func:`refresh_levels` at the next state."""
    X, drift, row = _split(model, barrier, x)
    U = np.atleast_2d(np.asarray(u_applied, dtype=float))
    gen = drift + (row * U).sum(axis=1)
    state.I_L[:, column] += gen * dt
    return state


def refresh_levels(state: RacbfControllerState, barriers: Sequence[BarrierSpec], bvals: np.ndarray,
                   t: float, on_change: Callable | None = None) -> np.ndarray:
    """Re-evaluate occupied levels; changed entries restart ``I_L`` at 0 and
    take the new level's gap. Returns the boolean change mask (N, nb)."""
    changed = np.zeros(state.level.shape, dtype=bool)
    for j, b in enumerate(barriers):
        new = b.level_index(bvals[:, j])
        # outside the safe set the top level stays in force
        new = np.minimum(new, len(b.levels) - 1)
        ch = new != state.level[:, j]
        if ch.any():
            if on_change is not None:
                for lane in np.flatnonzero(ch):
                    on_change(t, int(lane), j, int(state.level[lane, j]), int(new[lane]), float(state.I_L[lane, j]))
            state.entry_I[ch, j] = state.I_L[ch, j]
            state.entry_time[ch, j] = t
            state.I_L[ch, j] = 0.0
            state.gap[ch, j] = _level_gap(b, new[ch])
            state.level[ch, j] = new[ch]
            state.level_changes[ch, j] += 1
        changed[:, j] = ch
    return changed


# ----------------------------------------------------------------------------
# batched filter controller
# ----------------------------------------------------------------------------


Nominal = Callable[[float, np.ndarray], np.ndarray]


class CbfFilter:
    """Batched CBF-QP controller: nominal law, one row per filtered barrier,
    and a shared input box. RA-CBF rows carry their own ``I_L`` state.

    ``model_for`` may return a per-lane-batch model (for scenarios whose
    drift depends on per-lane parameters); otherwise ``model`` is used.
    """

    def __init__(self, model: SdeModel, filtered: Sequence[FilteredBarrier], nominal: Nominal,
                 u_lo=None, u_hi=None, slack_weight: float = 1e4, log_debug: bool = False):
        self.model = model
        self.m = model.m
        self.filtered = list(filtered)
        self.nominal = nominal
        self.u_lo = None if u_lo is None else np.asarray(u_lo, dtype=float)
        self.u_hi = None if u_hi is None else np.asarray(u_hi, dtype=float)
        self.slack_weight = slack_weight
        self.c = np.array([-1.0 if fb.soft else 0.0 for fb in self.filtered])
        self.racbf_cols = [j for j, fb in enumerate(self.filtered) if isinstance(fb.rule, RacbfRule)]
        self.state: RacbfControllerState | None = None
        self.debug: list | None = [] if log_debug else None
        for fb in self.filtered:
            fb.check_admissible()

    # -- Controller protocol -------------------------------------------------

    def reset(self, x0: np.ndarray) -> None:
        barriers = [self.filtered[j].barrier for j in self.racbf_cols]
        self.state = RacbfControllerState.start(barriers, x0)

    def integrator_values(self) -> np.ndarray:
        return self.state.I_L

    def act(self, t: float, X: np.ndarray, dt: float):
        N = X.shape[0]
        f, g, s = self.model.evaluate(X)
        nr = len(self.filtered)
        A = np.empty((N, nr, self.m))
        drift = np.empty((N, nr))
        b = np.empty((N, nr))
        bvals = np.empty((N, nr))
        for j, fb in enumerate(self.filtered):
            d, row, _ = decompose(fb.barrier, X, f, g, s)
            A[:, j] = row
            drift[:, j] = d
            bvals[:, j] = fb.barrier.value(X)

        h_all = np.full((N, nr), np.nan)
        levels = np.zeros((N, nr), dtype=int)
        if self.racbf_cols:
            st = self.state
            on_change = self._log_change if self.debug is not None and N == 1 else None
            refresh_levels(st, [self.filtered[j].barrier for j in self.racbf_cols],
                           bvals[:, self.racbf_cols], t, on_change)
            for k, j in enumerate(self.racbf_cols):
                rule = self.filtered[j].rule
                h_all[:, j] = racbf_h_values(rule, st.level[:, k], st.gap[:, k], st.I_L[:, k])
                levels[:, j] = st.level[:, k]
        for j, fb in enumerate(self.filtered):
            if isinstance(fb.rule, ScbfRule):
                b[:, j] = drift[:, j] + fb.rule.alpha * bvals[:, j] - fb.rule.beta
            else:
                b[:, j] = drift[:, j] - fb.rule.k_alpha * h_all[:, j]

        u0 = np.asarray(self.nominal(t, X), dtype=float).reshape(N, self.m)
        if self.u_lo is not None or self.u_hi is not None:
            u0 = np.clip(u0, self.u_lo if self.u_lo is not None else -np.inf,
                         self.u_hi if self.u_hi is not None else np.inf)
        sol = qp.solve_cbf_qp_batch(u0, A, b, self.c, self.u_lo, self.u_hi, self.slack_weight)
        U = sol.u

        if self.racbf_cols:
            gen = drift[:, self.racbf_cols] + (A[:, self.racbf_cols] * U[:, None, :]).sum(axis=2)
            self.state.I_L += gen * dt

        if self.debug is not None and N == 1:
            status = qp.STATUS_NAMES[int(sol.status[0])]
            for j, fb in enumerate(self.filtered):
                self.debug.append({
                    "t": t, "barrier": fb.barrier.name, "level": int(levels[0, j]),
                    "I_L": "" if not np.isfinite(h_all[0, j]) else float(
                        self.state.I_L[0, self.racbf_cols.index(j)] - (gen[0, self.racbf_cols.index(j)] * dt)),
                    "h": "" if not np.isfinite(h_all[0, j]) else float(h_all[0, j]),
                    "b": float(b[0, j]), "status": status, "delta": float(sol.delta[0]),
                })
        return U, sol.infeasible

    def _log_change(self, t, lane, col, old, new, I_L):
        name = self.filtered[self.racbf_cols[col]].barrier.name
        self.debug.append({"t": t, "barrier": name, "level": new, "I_L": I_L, "h": "",
                           "b": "", "status": f"level_change {old}->{new}", "delta": ""})
