"""Control-affine SDEs, Euler-Maruyama stepping and stopped-process trials.

All evaluators work on *lanes*: a state batch of shape ``(N, n)`` where every
row is an independent trial. Trials advance in lock-step, but every operation
is row-wise, so a lane's trajectory depends only on its own seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class IntegrationFault(RuntimeError):
    """A model evaluation produced a non-finite value."""

    def __init__(self, message: str, state: np.ndarray, lane: int | None = None, step: int | None = None):
        super().__init__(message)
        self.state = np.asarray(state)
        self.lane = lane
        self.step = step


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class SdeModel:
    """``dx = (f(x) + g(x) u) dt + sigma(x) dw`` with batched evaluators.

    ``drift`` maps (N, n) -> (N, n); ``control_matrix`` maps (N, n) -> (N, n, m);
    ``diffusion`` maps (N, n) -> (N, n, q).
    """

    n: int
    m: int
    q: int
    drift: Callable[[np.ndarray], np.ndarray]
    control_matrix: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    name: str = "sde"

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        X = np.atleast_2d(x)
        f = self.drift(X)
        g = self.control_matrix(X)
        s = self.diffusion(X)
        N = X.shape[0]
        if f.shape != (N, self.n) or g.shape != (N, self.n, self.m) or s.shape != (N, self.n, self.q):
            raise ValueError(
                f"{self.name}: inconsistent shapes drift {f.shape}, control {g.shape}, "
                f"diffusion {s.shape} for n={self.n}, m={self.m}, q={self.q}"
            )
        return f, g, s


def as_lanes(x: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    """Promote a single state to a one-lane batch; report whether it was single."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ValueError(f"expected state of length {n}, got {arr.shape}")
        return arr[None, :], True
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ValueError(f"expected state batch of shape (N, {n}), got {arr.shape}")
    return arr, False


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    # row-wise (N, a, b) @ (N, b) without BLAS batching so results never depend on N
    return (M * v[:, None, :]).sum(axis=2)


def euler_maruyama_step(model: SdeModel, x, u, dt: float, xi) -> np.ndarray:
    """``x + (f + g u) dt + sigma sqrt(dt) xi`` for one state or a lane batch."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    X, single = as_lanes(x, model.n)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    Xi = np.atleast_2d(np.asarray(xi, dtype=float))
    f, g, s = model.evaluate(X)
    x_next = X + (f + _matvec(g, U)) * dt + _matvec(s, Xi) * math.sqrt(dt)
    bad = ~np.isfinite(x_next).all(axis=1)
    if bad.any():
        lane = int(np.flatnonzero(bad)[0])
        raise IntegrationFault(f"non-finite state after step from lane {lane}", X[lane], lane=lane)
    return x_next[0] if single else x_next


# ----------------------------------------------------------------------------
# seeding and noise
# ----------------------------------------------------------------------------


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """64-bit trial seed from a base seed and a trial index."""
    return splitmix64(splitmix64(int(base_seed) & MASK64) ^ (int(index) & MASK64))


def substream(seed: int, tag: int) -> np.random.Generator:
    """Independent Philox stream for a trial-level purpose (initial conditions, ...)."""
    return np.random.Generator(np.random.Philox(key=splitmix64(int(seed) ^ splitmix64(tag))))


class LaneNoise:
    """Standard normal increments for a set of lanes.

    Lane ``i`` owns a Philox generator keyed by its trial seed and reads its
    draws in order ``(step, channel)``, so the draw for a given
    ``(seed, step, channel)`` never depends on which other lanes are present.
    """

    def __init__(self, seeds: Sequence[int], q: int, block: int = 256):
        self.q = q
        self.block = block
        self._gens = [np.random.Generator(np.random.Philox(key=int(s) & MASK64)) for s in seeds]
        self._buf = np.empty((len(self._gens), block, q))
        self._start = -block

    def draw(self, step: int) -> np.ndarray:
        if step < self._start or step >= self._start + self.block:
            if step != self._start + self.block:
                raise ValueError("noise must be consumed in step order")
            self._start = step
            for i, gen in enumerate(self._gens):
                self._buf[i] = gen.standard_normal((self.block, self.q))
        return self._buf[:, step - self._start, :]


# ----------------------------------------------------------------------------
# barriers and controllers as seen by the simulator
# ----------------------------------------------------------------------------


class Monitored(Protocol):
    name: str

    def value(self, x: np.ndarray) -> np.ndarray: ...


class Controller(Protocol):
    """Batched feedback law with per-lane internal state (one owner per batch)."""

    m: int

    def reset(self, x0: np.ndarray) -> None: ...

    def act(self, t: float, x: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Return controls (N, m) and a per-lane infeasibility flag (N,)."""
        ...


class FeedbackController:
    """Stateless wrapper around a batched map ``u = k(t, x)``."""

    def __init__(self, law: Callable[[float, np.ndarray], np.ndarray], m: int):
        self.law = law
        self.m = m

    def reset(self, x0: np.ndarray) -> None:
        pass

    def act(self, t, x, dt):
        u = np.asarray(self.law(t, x), dtype=float)
        return u.reshape(x.shape[0], self.m), np.zeros(x.shape[0], dtype=bool)


@dataclass
class LaneOutcome:
    """Per-lane summary of a lock-step batch."""

    seeds: np.ndarray
    stopped: np.ndarray
    tau: np.ndarray  # NaN where the lane never exited
    max_barrier: np.ndarray  # (N, n_barriers)
    infeasible_steps: np.ndarray
    final_state: np.ndarray
    exit_barrier: np.ndarray  # index of first barrier >= 1, -1 if none


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray  # NaN rows after the exit and on the final grid point
    barrier_names: list[str]
    barrier_values: np.ndarray  # (K+1, n_barriers)
    stopped: bool
    tau: float | None
    seed: int
    infeasible_steps: int = 0
    integrator: np.ndarray | None = None  # running I_L per barrier, when the controller keeps one
    debug_rows: list[dict] = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_csv(self, path: str | Path) -> None:
        n = self.states.shape[1]
        m = self.controls.shape[1]
        header = ["t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)]
        header += [f"B_{name}" for name in self.barrier_names] + ["stopped", "tau"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            tau = "" if self.tau is None else repr(self.tau)
            for k, t in enumerate(self.times):
                row = [repr(float(t))]
                row += [repr(float(v)) for v in self.states[k]]
                row += ["" if not np.isfinite(v) else repr(float(v)) for v in self.controls[k]]
                row += [repr(float(v)) for v in self.barrier_values[k]]
                row += [int(self.stopped), tau]
                w.writerow(row)

    def write_debug_csv(self, path: str | Path) -> None:
        cols = ["t", "barrier", "level", "I_L", "h", "b", "status", "delta"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.debug_rows:
                w.writerow({c: row.get(c, "") for c in cols})


_BRIDGE_TAG = 0xB1D6E
_erfc_vec = np.frompyfunc(math.erfc, 1, 1)


def _lie_sigma_sq(barrier, X: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``|grad B . sigma|^2`` per lane, for barriers exposing a gradient."""
    grad = barrier.gradient(X)
    support = getattr(barrier, "support", None)
    if support is not None:
        s = s[:, list(support), :]
    row = (grad[:, :, None] * s).sum(axis=1)
    return (row * row).sum(axis=1)


def n_steps(T: float, dt: float) -> int:
    if not (0 < dt <= T):
        raise PreconditionError(f"need 0 < dt <= T, got dt={dt}, T={T}")
    k = int(round(T / dt))
    if abs(k * dt - T) > 1e-9 * T:
        raise PreconditionError(f"T={T} is not an integer multiple of dt={dt}")
    return k


def simulate_lanes(
    model: SdeModel,
    controller: Controller,
    barriers: Sequence[Monitored],
    x0: np.ndarray,
    T: float,
    dt: float,
    seeds: Sequence[int],
    *,
    record: bool = False,
    observers: Sequence[Callable] = (),
    exit_test: str = "grid",
):
    """Advance ``len(seeds)`` independent stopped-process trials in lock-step.

    Each grid point: evaluate barriers, freeze lanes with any ``B >= 1``,
    query the controller (zero-order hold), apply one Euler-Maruyama step.
    Observers are called as ``obs(k, t, x, active)`` before the step.

    ``exit_test="bridge"`` additionally detects exits between grid points:
    with ``B`` treated locally as a Brownian bridge of variance rate
    ``|grad B . sigma|^2`` between the two grid values, the lane exits with
    probability ``exp(-2 (1 - B_k)(1 - B_k+1) / (|grad B . sigma|^2 dt))``,
    decided by a separate per-lane uniform stream. The exit time is then
    recorded as the later grid point.

    Returns a :class:`LaneOutcome`; with ``record=True`` also the per-step
    arrays ``(states, controls, barrier_values)``.
    """
    if exit_test not in ("grid", "bridge"):
        raise ValueError(f"unknown exit test {exit_test!r}")
    K = n_steps(T, dt)
    X = np.array(np.atleast_2d(x0), dtype=float)
    N = X.shape[0]
    if len(seeds) != N:
        raise ValueError("need one seed per lane")
    nb = len(barriers)
    noise = LaneNoise(seeds, model.q)
    sqdt = math.sqrt(dt)

    stopped = np.zeros(N, dtype=bool)
    tau = np.full(N, np.nan)
    exit_barrier = np.full(N, -1)
    max_b = np.full((N, nb), -np.inf)
    infeasible = np.zeros(N, dtype=np.int64)
    if record:
        states = np.empty((K + 1, N, model.n))
        controls = np.full((K + 1, N, model.m), np.nan)
        bvals_rec = np.empty((K + 1, N, nb))

    bridge = exit_test == "bridge" and nb > 0
    if bridge:
        bridge_noise = LaneNoise([derive_seed(int(sd), _BRIDGE_TAG) for sd in seeds], nb)
        prev_b = prev_v = None

    controller.reset(X)
    for k in range(K + 1):
        t = k * dt
        bvals = np.column_stack([b.value(X) for b in barriers]) if nb else np.zeros((N, 0))
        if k == 0 and nb and (bvals >= 1.0).any():
            lane = int(np.flatnonzero((bvals >= 1.0).any(axis=1))[0])
            raise PreconditionError(f"lane {lane} starts outside the safe set (B(x0) >= 1)")
        active = ~stopped
        if bridge and prev_b is not None:
            z = bridge_noise.draw(k - 1)
            uniform = 0.5 * _erfc_vec(-z / math.sqrt(2.0)).astype(float)
            gap = np.maximum(1.0 - prev_b, 0.0) * np.maximum(1.0 - bvals, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                p = np.where(prev_v > 0, np.exp(-2.0 * gap / (prev_v * dt)), 0.0)
            crossed = (uniform < p) & active[:, None]
            bvals = np.where(crossed, np.maximum(bvals, 1.0), bvals)
        np.maximum(max_b, np.where(active[:, None], bvals, -np.inf), out=max_b)
        if nb:
            hit = active & (bvals >= 1.0).any(axis=1)
            if hit.any():
                stopped |= hit
                tau[hit] = t
                exit_barrier[hit] = np.argmax(bvals[hit] >= 1.0, axis=1)
        if record:
            states[k] = X
            bvals_rec[k] = bvals
        if k == K:
            break
        active = ~stopped
        for obs in observers:
            obs(k, t, X, active)
        if not active.any():
            if record:
                for kk in range(k + 1, K + 1):
                    states[kk] = X
                    bvals_rec[kk] = bvals
            break
        U, infeas = controller.act(t, X, dt)
        infeasible += (infeas & active)
        f, g, s = model.evaluate(X)
        if bridge:
            prev_b = bvals
            prev_v = np.column_stack([_lie_sigma_sq(b, X, s) for b in barriers])
        xi = noise.draw(k)
        X_next = X + (f + _matvec(g, U)) * dt + _matvec(s, xi) * sqdt
        bad = active & ~np.isfinite(X_next).all(axis=1)
        if bad.any():
            lane = int(np.flatnonzero(bad)[0])
            raise IntegrationFault(
                f"non-finite state at step {k} in lane {lane} (seed {seeds[lane]})",
                X[lane], lane=lane, step=k,
            )
        if record:
            controls[k] = np.where(active[:, None], U, np.nan)
        X = np.where(active[:, None], X_next, X)

    outcome = LaneOutcome(
        seeds=np.asarray(seeds, dtype=np.uint64),
        stopped=stopped,
        tau=tau,
        max_barrier=max_b,
        infeasible_steps=infeasible,
        final_state=X,
        exit_barrier=exit_barrier,
    )
    if record:
        return outcome, (states, controls, bvals_rec)
    return outcome


def simulate_trial(
    model: SdeModel,
    controller: Controller,
    barriers: Sequence[Monitored],
    x0,
    T: float,
    dt: float,
    seed: int,
) -> TrajectoryRecord:
    """Single stopped-process trial with the full trajectory recorded."""
    x0 = np.asarray(x0, dtype=float).reshape(1, model.n)
    integrator_trace: list[np.ndarray] = []
    debug = getattr(controller, "debug", None)
    if debug is not None:
        controller.debug = []

    observers = []
    if hasattr(controller, "integrator_values"):
        observers.append(lambda k, t, x, active: integrator_trace.append(controller.integrator_values()[0].copy()))

    outcome, (states, controls, bvals) = simulate_lanes(
        model, controller, barriers, x0, T, dt, [seed], record=True, observers=observers
    )
    K = states.shape[0] - 1
    times = np.arange(K + 1) * dt
    integ = None
    if integrator_trace:
        integ = np.array(integrator_trace)
        if len(integ) < K + 1:
            pad = np.repeat(integ[-1:], K + 1 - len(integ), axis=0)
            integ = np.vstack([integ, pad])
    stopped = bool(outcome.stopped[0])
    return TrajectoryRecord(
        times=times,
        states=states[:, 0, :],
        controls=controls[:, 0, :],
        barrier_names=[b.name for b in barriers],
        barrier_values=bvals[:, 0, :],
        stopped=stopped,
        tau=float(outcome.tau[0]) if stopped else None,
        seed=int(seed),
        infeasible_steps=int(outcome.infeasible_steps[0]),
        integrator=integ,
        debug_rows=list(getattr(controller, "debug", None) or []),
    )
