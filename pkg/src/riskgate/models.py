"""Dynamics and driver models: stochastic single integrator, kinematic
bicycle, IDM car following, and the nominal (unfiltered) control laws."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_are

from .sde import SdeModel

# bicycle state layout
X, Y, PSI, V, BETA = range(5)
BICYCLE_DIM = 5
BETA_LIMIT = math.pi / 2 - 1e-3


def single_integrator_model(sigma_x: float, sigma_y: float) -> SdeModel:
    """Planar velocity-controlled robot with constant diagonal diffusion."""
    if sigma_x < 0 or sigma_y < 0:
        raise ValueError("noise strengths must be nonnegative")
    G = np.eye(2)
    S = np.diag([sigma_x, sigma_y])

    def drift(x):
        return np.zeros_like(x)

    def control_matrix(x):
        return np.broadcast_to(G, (x.shape[0], 2, 2))

    def diffusion(x):
        return np.broadcast_to(S, (x.shape[0], 2, 2))

    return SdeModel(2, 2, 2, drift, control_matrix, diffusion, name="single_integrator")


# ----------------------------------------------------------------------------
# kinematic bicycle
# ----------------------------------------------------------------------------


def bicycle_velocity(psi, v, beta):
    """Planar c.g. velocity ``v (cos psi - sin psi tan beta, sin psi + cos psi tan beta)``."""
    tb = np.tan(beta)
    c, s = np.cos(psi), np.sin(psi)
    return v * (c - s * tb), v * (s + c * tb)


def bicycle_drift(z: np.ndarray, l_r: float) -> np.ndarray:
    """Drift of a stack of bicycle states (..., 5)."""
    psi, v, beta = z[..., PSI], z[..., V], z[..., BETA]
    xd, yd = bicycle_velocity(psi, v, beta)
    out = np.zeros_like(z)
    out[..., X] = xd
    out[..., Y] = yd
    out[..., PSI] = v * np.tan(beta) / l_r
    return out


def drag_noise(v_bar: float = 35.0, dt: float = 0.01, a_bar: float = 2.0, omega_bar: float = math.pi / 16):
    """Noise strengths tied to aerodynamic drag at speed ``v_bar``:
    ``sigma_a = (0.1 + 5 v + 0.25 v^2) dt`` and ``sigma_omega = sigma_a omega_bar / a_bar``."""
    a_drag = 0.1 + 5.0 * v_bar + 0.25 * v_bar**2
    sigma_a = a_drag * dt
    return sigma_a, sigma_a * omega_bar / a_bar


def bicycle_model(l_f: float, l_r: float, sigma_a: float, sigma_omega: float) -> SdeModel:
    """Single stochastic kinematic bicycle, state (x, y, psi, v, beta),
    control (a, omega). The noise enters only the v and beta channels, so the
    two nonzero Wiener channels are kept (q = 2)."""
    if l_f <= 0 or l_r <= 0:
        raise ValueError("wheelbase lengths must be positive")
    G = np.zeros((5, 2))
    G[V, 0] = 1.0
    G[BETA, 1] = 1.0
    S = np.zeros((5, 2))
    S[V, 0] = sigma_a
    S[BETA, 1] = sigma_omega

    def drift(z):
        return bicycle_drift(z, l_r)

    def control_matrix(z):
        return np.broadcast_to(G, (z.shape[0], 5, 2))

    def diffusion(z):
        return np.broadcast_to(S, (z.shape[0], 5, 2))

    return SdeModel(5, 2, 2, drift, control_matrix, diffusion, name="bicycle")


def clamp_slip_rate(beta, omega, omega_bar):
    """Saturate omega to the box and forbid pushing beta past its bound."""
    omega = np.clip(omega, -omega_bar, omega_bar)
    omega = np.where((beta >= BETA_LIMIT) & (omega > 0), 0.0, omega)
    omega = np.where((beta <= -BETA_LIMIT) & (omega < 0), 0.0, omega)
    return omega


# ----------------------------------------------------------------------------
# intelligent driver model
# ----------------------------------------------------------------------------


class LeaderOverlap(ValueError):
    pass


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0
    time_gap: float = 0.5
    s0: float = 2.0
    a_max: float = 2.0
    b_comf: float = 2.0
    exponent: float = 4.0
    a_hard: float = 8.0

    def __post_init__(self):
        for name in ("v0", "time_gap", "s0", "a_max", "b_comf", "a_hard"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive")


def idm_accel(v, v_lead, gap, params: IdmParams, time_gap=None, check: bool = True):
    """IDM acceleration, clamped to [-a_hard, a_max]; ``gap = inf`` means free road.

    ``time_gap`` overrides ``params.time_gap`` (arrays allowed, for per-vehicle
    randomized drivers).
    """
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    if check and np.any(gap <= 0):
        raise LeaderOverlap("IDM gap must be positive (leader overlap)")
    tg = params.time_gap if time_gap is None else np.asarray(time_gap, dtype=float)
    dv = v - np.asarray(v_lead, dtype=float)
    s_star = params.s0 + np.maximum(0.0, v * tg + v * dv / (2.0 * math.sqrt(params.a_max * params.b_comf)))
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(np.isfinite(gap), (s_star / np.maximum(gap, 1e-9)) ** 2, 0.0)
    a = params.a_max * (1.0 - (np.maximum(v, 0.0) / params.v0) ** params.exponent - interaction)
    out = np.clip(a, -params.a_hard, params.a_max)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# nominal controllers
# ----------------------------------------------------------------------------


def robot_nominal(x, goal, k: float, v_max: float = np.inf):
    """Proportional goal seeking ``-k (x - goal)``, saturated per component."""
    if k <= 0:
        raise ValueError("gain must be positive")
    u = -k * (np.asarray(x, dtype=float) - np.asarray(goal, dtype=float))
    return np.clip(u, -v_max, v_max)


@dataclass(frozen=True)
class LqrGains:
    """State feedback on (y - y_d, psi, beta, v - v_d) -> (a, omega)."""

    K: np.ndarray  # (2, 4)

    @classmethod
    def from_riccati(cls, v_d: float = 30.0, l_r: float = 1.5, dt: float = 0.01,
                     Q=None, R=None) -> "LqrGains":
        Ac = np.zeros((4, 4))
        Ac[0, 1] = v_d
        Ac[0, 2] = v_d
        Ac[1, 2] = v_d / l_r
        Bc = np.zeros((4, 2))
        Bc[2, 1] = 1.0
        Bc[3, 0] = 1.0
        A = np.eye(4) + Ac * dt
        B = Bc * dt
        Q = np.eye(4) if Q is None else np.asarray(Q, dtype=float)
        R = np.eye(2) if R is None else np.asarray(R, dtype=float)
        P = solve_discrete_are(A, B, Q, R)
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        return cls(K)


def vehicle_nominal(state, y_d, v_d: float, gains: LqrGains, a_bar: float = 2.0,
                    omega_bar: float = math.pi / 16, psi_d=0.0):
    """Lane and speed tracking law for bicycle states (..., 5); returns (..., 2)."""
    z = np.asarray(state, dtype=float)
    err = np.stack([
        z[..., Y] - y_d,
        z[..., PSI] - psi_d,
        z[..., BETA],
        z[..., V] - v_d,
    ], axis=-1)
    # explicit sums: row results must not depend on how many rows are stacked
    K = gains.K
    u_a = -sum(K[0, j] * err[..., j] for j in range(4))
    u_w = -sum(K[1, j] * err[..., j] for j in range(4))
    a = np.clip(u_a, -a_bar, a_bar)
    omega = clamp_slip_rate(z[..., BETA], u_w, omega_bar)
    return np.stack([a, omega], axis=-1)
