"""Barrier functions and the differential operators built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sde import SdeModel, as_lanes


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar barrier ``B`` with analytic derivatives.

    ``value`` maps (N, n) -> (N,). ``gradient`` and ``hessian`` return
    derivatives with respect to the coordinates in ``support`` (all of them
    when ``support`` is None), shapes (N, k) and (N, k, k). ``noise_support``
    optionally lists the only Wiener channels whose diffusion columns can be
    nonzero on ``support``; the others are skipped when forming generator terms.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    gamma: float = 0.0
    levels: tuple[float, ...] = ()
    support: tuple[int, ...] | None = None
    noise_support: tuple[int, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)
    jet: Callable[[np.ndarray], tuple] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"{self.name}: gamma must lie in [0, 1]")
        levels = tuple(float(v) for v in self.levels) or (float(self.gamma), 1.0)
        if levels[0] != self.gamma:
            levels = (float(self.gamma),) + levels[1:]
        if any(b <= a for a, b in zip(levels, levels[1:])) or levels[-1] != 1.0:
            raise ContractViolation(f"{self.name}: levels must ascend from gamma to 1, got {levels}")
        object.__setattr__(self, "levels", levels)
        if self.support is not None:
            object.__setattr__(self, "support", tuple(int(i) for i in self.support))
        if self.noise_support is not None:
            object.__setattr__(self, "noise_support", tuple(int(i) for i in self.noise_support))

    def with_levels(self, gamma: float, levels: Sequence[float] | None = None) -> "BarrierSpec":
        lv = (gamma, 1.0) if levels is None else tuple(levels)
        return BarrierSpec(self.name, self.value, self.gradient, self.hessian, gamma,
                           lv, self.support, self.noise_support, dict(self.meta), self.jet)

    def level_index(self, b: np.ndarray) -> np.ndarray:
        """1-based index of the smallest level with ``B < mu_i`` (k+1 outside S)."""
        inner = np.asarray(self.levels[1:])
        return np.searchsorted(inner, b, side="right") + 1


def _restrict(barrier: BarrierSpec, f: np.ndarray, g: np.ndarray, s: np.ndarray):
    if barrier.noise_support is not None:
        s = s[:, :, list(barrier.noise_support)]
    if barrier.support is None:
        return f, g, s
    idx = list(barrier.support)
    return f[:, idx], g[:, idx, :], s[:, idx, :]


def decompose(barrier: BarrierSpec, X: np.ndarray, f: np.ndarray, g: np.ndarray, s: np.ndarray):
    """Generator split from pre-evaluated model terms.

    Returns ``(drift_part (N,), control_row (N, m), lie_sigma (N, q))``.
    """
    if barrier.jet is not None:
        _, grad, hess = barrier.jet(X)
    else:
        grad = barrier.gradient(X)
        hess = barrier.hessian(X)
    f, g, s = _restrict(barrier, f, g, s)
    if grad.shape != f.shape:
        raise ContractViolation(f"{barrier.name}: gradient shape {grad.shape} vs {f.shape}")
    lie_f = (grad * f).sum(axis=1)
    control_row = (grad[:, :, None] * g).sum(axis=1)
    lie_sigma = (grad[:, :, None] * s).sum(axis=1)
    hs = (hess[:, :, :, None] * s[:, None, :, :]).sum(axis=2)
    trace = (hs * s).sum(axis=(1, 2))
    return lie_f + 0.5 * trace, control_row, lie_sigma


def _prepare(model: SdeModel, barrier: BarrierSpec, x):
    X, single = as_lanes(x, model.n)
    f, g, s = model.evaluate(X)
    return X, single, f, g, s


def generator_decomposition(model: SdeModel, barrier: BarrierSpec, x):
    """``(grad B . f + 1/2 Tr(sigma^T hess B sigma), grad B . g)``."""
    X, single, f, g, s = _prepare(model, barrier, x)
    drift, row, _ = decompose(barrier, X, f, g, s)
    if single:
        return float(drift[0]), row[0]
    return drift, row


def generator(model: SdeModel, barrier: BarrierSpec, x, u):
    """Infinitesimal generator of B along the SDE under control u."""
    X, single, f, g, s = _prepare(model, barrier, x)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    if U.shape[1] != model.m:
        raise ContractViolation(f"control has {U.shape[1]} components, model expects {model.m}")
    drift, row, _ = decompose(barrier, X, f, g, s)
    out = drift + (row * U).sum(axis=1)
    return float(out[0]) if single else out


def sigma_lie(model: SdeModel, barrier: BarrierSpec, x):
    """Diffusion Lie derivative ``grad B . sigma`` (a q-row per state, or one
    entry per ``noise_support`` channel when the barrier declares it)."""
    X, single, f, g, s = _prepare(model, barrier, x)
    out = diffusion_lie(barrier, X, s)
    return out[0] if single else out


def diffusion_lie(barrier: BarrierSpec, X: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``grad B . sigma`` for lanes ``X`` given the full diffusion ``s``
    (N, n, q); avoids re-evaluating drift when only the noise term is needed."""
    grad = barrier.gradient(X)
    if barrier.noise_support is not None:
        s = s[:, :, list(barrier.noise_support)]
    if barrier.support is not None:
        s = s[:, list(barrier.support), :]
    return (grad[:, :, None] * s).sum(axis=1)


# ----------------------------------------------------------------------------
# verification helpers
# ----------------------------------------------------------------------------


def sample_safe_set(barrier: BarrierSpec, low, high, count: int, seed: int = 0, level: float = 1.0) -> np.ndarray:
    """Uniform rejection sampling of ``{B < level}`` inside the box [low, high]."""
    rng = np.random.default_rng(seed)
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    out = []
    have = 0
    while have < count:
        cand = rng.uniform(low, high, size=(max(64, 2 * (count - have)), low.size))
        keep = cand[barrier.value(cand) < level]
        out.append(keep)
        have += len(keep)
    return np.vstack(out)[:count]


def _embed(barrier: BarrierSpec, n: int) -> list[int]:
    return list(range(n)) if barrier.support is None else list(barrier.support)


@dataclass
class DerivativeReport:
    gradient_error: float
    hessian_error: float
    symmetry_error: float
    ok: bool


def check_derivatives(barrier: BarrierSpec, points: np.ndarray, step: float = 1e-5, tol: float = 1e-6) -> DerivativeReport:
    """Compare analytic derivatives with central finite differences.

    Errors are mixed: ``|a - fd| / max(1, |fd|)``, maximized over points and
    entries.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[1]
    idx = _embed(barrier, n)
    grad = barrier.gradient(X)
    hess = barrier.hessian(X)
    fd_grad = np.empty_like(grad)
    fd_hess = np.empty_like(hess)
    for j, col in enumerate(idx):
        e = np.zeros(n)
        e[col] = step
        fd_grad[:, j] = (barrier.value(X + e) - barrier.value(X - e)) / (2 * step)
        fd_hess[:, :, j] = (barrier.gradient(X + e) - barrier.gradient(X - e)) / (2 * step)
    g_err = float(np.max(np.abs(grad - fd_grad) / np.maximum(1.0, np.abs(fd_grad)), initial=0.0))
    h_err = float(np.max(np.abs(hess - fd_hess) / np.maximum(1.0, np.abs(fd_hess)), initial=0.0))
    scale = np.maximum(1.0, np.abs(hess))
    sym = float(np.max(np.abs(hess - np.swapaxes(hess, 1, 2)) / scale, initial=0.0))
    return DerivativeReport(g_err, h_err, sym, g_err <= tol and h_err <= tol and sym <= 1e-12)
