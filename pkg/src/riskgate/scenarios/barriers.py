"""Barrier functions of the bundled scenarios, with analytic derivatives."""

from __future__ import annotations

import math

import numpy as np

from ..barrier import BarrierSpec
from ..models import BETA, PSI, V, X, Y, bicycle_velocity

# ----------------------------------------------------------------------------
# robot: disk of radius R_c
# ----------------------------------------------------------------------------


def robot_barrier(radius: float = 1.0, gamma: float = 0.5, levels=None, center=(0.0, 0.0)) -> BarrierSpec:
    """``B(z) = |z - c|^2 / R_c^2`` on planar positions."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    r2 = radius * radius

    def value(Z):
        d = Z[:, :2] - c
        return (d * d).sum(axis=1) / r2

    def gradient(Z):
        return 2.0 * (Z[:, :2] - c) / r2

    def hessian(Z):
        return np.broadcast_to(2.0 * np.eye(2) / r2, (Z.shape[0], 2, 2)).copy()

    return BarrierSpec("disk", value, gradient, hessian, gamma, levels or (gamma, 1.0), support=(0, 1),
                       meta={"radius": radius})


# ----------------------------------------------------------------------------
# shared helpers for B = exp(-h)
# ----------------------------------------------------------------------------


def _exp_barrier(h, gh, Hh):
    """Value, gradient and Hessian of ``exp(-h)`` from those of ``h``."""
    B = np.exp(-h)
    grad = -B[:, None] * gh
    hess = B[:, None, None] * (gh[:, :, None] * gh[:, None, :] - Hh)
    return B, grad, hess


def _velocity_jets(psi, v, beta):
    """Planar velocity V(psi, v, beta) with first and second derivatives.

    Returns ``V (N, 2)``, ``J (N, 2, 3)`` and ``H (N, 2, 3, 3)`` over (psi, v, beta).
    """
    tb = np.tan(beta)
    sec2 = 1.0 + tb * tb
    c, s = np.cos(psi), np.sin(psi)
    vx, vy = bicycle_velocity(psi, v, beta)
    N = psi.shape[0]
    J = np.empty((N, 2, 3))
    J[:, 0, 0] = -vy
    J[:, 1, 0] = vx
    J[:, 0, 1] = c - s * tb
    J[:, 1, 1] = s + c * tb
    J[:, 0, 2] = -v * s * sec2
    J[:, 1, 2] = v * c * sec2
    H = np.zeros((N, 2, 3, 3))
    # x component
    H[:, 0, 0, 0] = -vx
    H[:, 0, 0, 1] = H[:, 0, 1, 0] = -(s + c * tb)
    H[:, 0, 0, 2] = H[:, 0, 2, 0] = -v * c * sec2
    H[:, 0, 1, 2] = H[:, 0, 2, 1] = -s * sec2
    H[:, 0, 2, 2] = -2.0 * v * s * sec2 * tb
    # y component
    H[:, 1, 0, 0] = -vy
    H[:, 1, 0, 1] = H[:, 1, 1, 0] = c - s * tb
    H[:, 1, 0, 2] = H[:, 1, 2, 0] = -v * s * sec2
    H[:, 1, 1, 2] = H[:, 1, 2, 1] = c * sec2
    H[:, 1, 2, 2] = 2.0 * v * c * sec2 * tb
    return np.column_stack([vx, vy]), J, H


# ----------------------------------------------------------------------------
# road keeping
# ----------------------------------------------------------------------------


class RoadGeometry:
    """Lane centerline ``y_l`` for ``x >= x_j`` joined by a straight ramp of
    angle ``theta`` for ``x < x_j`` (``theta = 0`` gives a plain lane)."""

    def __init__(self, theta: float, w_l: float, y_l: float = 0.0, x_j: float = 0.0):
        if w_l <= 0:
            raise ValueError("lane width must be positive")
        self.theta = float(theta)
        self.w_l = float(w_l)
        self.y_l = float(y_l)
        self.x_j = float(x_j)

    def slope(self, px):
        return np.where(px < self.x_j, math.tan(self.theta), 0.0)

    def half_width(self, px):
        return np.where(px < self.x_j, self.w_l / (2.0 * math.cos(self.theta)), self.w_l / 2.0)

    def centerline(self, px):
        return self.y_l + self.slope(px) * (px - self.x_j)


def road_margin(geom: RoadGeometry, Z: np.ndarray, previews=(0.0, 1.0)):
    """``h_r = sum_tau (w_l / (2 cos theta))^2 - e_tau^2`` with the lateral
    deviation ``e_tau`` of the constant-velocity preview point ``p + tau pdot``
    from the centerline, plus its gradient and Hessian over the five bicycle
    coordinates."""
    x, y, psi, v, beta = Z[:, X], Z[:, Y], Z[:, PSI], Z[:, V], Z[:, BETA]
    N = Z.shape[0]
    Vel, JV, HV = _velocity_jets(psi, v, beta)
    h = np.zeros(N)
    gh = np.zeros((N, 5))
    Hh = np.zeros((N, 5, 5))
    for tau in previews:
        px = x + tau * Vel[:, 0]
        s = geom.slope(px)
        M = geom.half_width(px)
        e = y + tau * Vel[:, 1] - geom.centerline(px)
        # e = y - s (x - x_j) - y_l + tau (Vy - s Vx): linear in (x, y)
        de = np.zeros((N, 5))
        de[:, X] = -s
        de[:, Y] = 1.0
        de[:, 2:] = tau * (JV[:, 1, :] - s[:, None] * JV[:, 0, :])
        d2e = np.zeros((N, 5, 5))
        d2e[:, 2:, 2:] = tau * (HV[:, 1] - s[:, None, None] * HV[:, 0])
        h += M * M - e * e
        gh += -2.0 * e[:, None] * de
        Hh += -2.0 * (de[:, :, None] * de[:, None, :] + e[:, None, None] * d2e)
    return h, gh, Hh


def road_barrier(theta: float = 0.0, w_l: float = 3.0, y_l: float = 0.0, x_j: float = 0.0,
                 previews=(0.0, 1.0), offset: int = 0, noise_support=None, gamma: float = 0.0,
                 levels=None, name: str = "road") -> BarrierSpec:
    """``B_r = exp(-h_r)`` on the bicycle block starting at column ``offset``."""
    geom = RoadGeometry(theta, w_l, y_l, x_j)
    cols = tuple(range(offset, offset + 5))

    def parts(Z):
        return _exp_barrier(*road_margin(geom, Z[:, offset:offset + 5], previews))

    def value(Z):
        h, _, _ = road_margin(geom, Z[:, offset:offset + 5], previews)
        return np.exp(-h)

    return BarrierSpec(name, value, lambda Z: parts(Z)[1], lambda Z: parts(Z)[2], gamma,
                       levels or (gamma, 1.0), support=cols, noise_support=noise_support,
                       meta={"geometry": geom, "previews": tuple(previews)}, jet=parts)


# ----------------------------------------------------------------------------
# collision avoidance
# ----------------------------------------------------------------------------


def closest_approach_margin(dp, dv, d_min: float, horizon: float, relax: float = 0.1):
    """Future-focused margin ``|dp + dv tau*|^2 - d^2 + relax (|dp|^2 - d^2)``
    with ``tau* = clamp(-dp.dv / |dv|^2, 0, horizon)``.

    Returns ``h (N,)``, gradient ``(N, 4)`` and Hessian ``(N, 4, 4)`` over (dp, dv).
    """
    N = dp.shape[0]
    a = (dp * dv).sum(axis=1)
    s2 = (dv * dv).sum(axis=1)
    moving = s2 > 1e-12
    raw = np.where(moving, -a / np.where(moving, s2, 1.0), 0.0)
    tau = np.clip(raw, 0.0, horizon)
    interior = moving & (raw > 0.0) & (raw < horizon)
    c = dp + dv * tau[:, None]
    d2 = d_min * d_min
    h = (c * c).sum(axis=1) - d2 + relax * ((dp * dp).sum(axis=1) - d2)

    g = np.empty((N, 4))
    g[:, :2] = 2.0 * c + 2.0 * relax * dp
    g[:, 2:] = 2.0 * tau[:, None] * c

    I2 = np.eye(2)
    H = np.zeros((N, 4, 4))
    # tau* frozen (clamped branch)
    H[:, :2, :2] = 2.0 * I2
    H[:, :2, 2:] = 2.0 * tau[:, None, None] * I2
    H[:, 2:, :2] = 2.0 * tau[:, None, None] * I2
    H[:, 2:, 2:] = 2.0 * (tau * tau)[:, None, None] * I2
    if interior.any():
        k = np.flatnonzero(interior)
        dvk, dpk, tk, ck, sk = dv[k], dp[k], tau[k], c[k], s2[k]
        w = dpk + 2.0 * tk[:, None] * dvk  # -s2 * d tau / d dv
        outer_vv = dvk[:, :, None] * dvk[:, None, :] / sk[:, None, None]
        outer_vw = dvk[:, :, None] * w[:, None, :] / sk[:, None, None]
        H_pp = 2.0 * (I2 - outer_vv)
        H_pv = 2.0 * (tk[:, None, None] * I2 - outer_vw)
        H_vv = (-2.0 * ck[:, :, None] * w[:, None, :] / sk[:, None, None]
                + 2.0 * tk[:, None, None] * (tk[:, None, None] * I2 - outer_vw))
        H[k, :2, :2] = H_pp
        H[k, :2, 2:] = H_pv
        H[k, 2:, :2] = np.swapaxes(H_pv, 1, 2)
        H[k, 2:, 2:] = 0.5 * (H_vv + np.swapaxes(H_vv, 1, 2))
    H[:, :2, :2] += 2.0 * relax * I2
    return h, g, H


def collision_margin(Z, ego: int, other: int, d_min: float, horizon: float, relax: float = 0.1):
    """Collision margin between the bicycle blocks at columns ``ego`` and
    ``other``, with derivatives over the 10 stacked coordinates (ego first)."""
    ze = Z[:, ego:ego + 5]
    zi = Z[:, other:other + 5]
    Ve, Je, He = _velocity_jets(ze[:, PSI], ze[:, V], ze[:, BETA])
    Vi, Ji, Hi = _velocity_jets(zi[:, PSI], zi[:, V], zi[:, BETA])
    dp = zi[:, :2] - ze[:, :2]
    dv = Vi - Ve
    h, g_r, H_r = closest_approach_margin(dp, dv, d_min, horizon, relax)

    N = Z.shape[0]
    Jr = np.zeros((N, 4, 10))
    Jr[:, 0, 0] = Jr[:, 1, 1] = -1.0
    Jr[:, 0, 5] = Jr[:, 1, 6] = 1.0
    Jr[:, 2:, 2:5] = -Je
    Jr[:, 2:, 7:10] = Ji
    grad = (Jr * g_r[:, :, None]).sum(axis=1)
    HJ = (H_r[:, :, :, None] * Jr[:, None, :, :]).sum(axis=2)  # (N, 4, 10)
    hess = (Jr[:, :, :, None] * HJ[:, :, None, :]).sum(axis=1)
    gv = g_r[:, 2:]
    hess[:, 2:5, 2:5] -= (gv[:, :, None, None] * He).sum(axis=1)
    hess[:, 7:10, 7:10] += (gv[:, :, None, None] * Hi).sum(axis=1)
    return h, grad, hess


def collision_barrier(ego: int = 0, other: int = 5, d_min: float = 2.5, horizon: float = 5.0,
                      relax: float = 0.1, noise_support=None, gamma: float = 0.0, levels=None,
                      name: str | None = None) -> BarrierSpec:
    """``B = exp(-h)`` with the relaxed closest-approach margin between two
    bicycle blocks (column offsets ``ego`` and ``other``)."""
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    cols = tuple(range(ego, ego + 5)) + tuple(range(other, other + 5))

    def parts(Z):
        return _exp_barrier(*collision_margin(Z, ego, other, d_min, horizon, relax))

    def value(Z):
        ze, zi = Z[:, ego:ego + 5], Z[:, other:other + 5]
        Ve = np.column_stack(bicycle_velocity(ze[:, PSI], ze[:, V], ze[:, BETA]))
        Vi = np.column_stack(bicycle_velocity(zi[:, PSI], zi[:, V], zi[:, BETA]))
        dp = zi[:, :2] - ze[:, :2]
        dv = Vi - Ve
        a = (dp * dv).sum(axis=1)
        s2 = (dv * dv).sum(axis=1)
        moving = s2 > 1e-12
        tau = np.clip(np.where(moving, -a / np.where(moving, s2, 1.0), 0.0), 0.0, horizon)
        c = dp + dv * tau[:, None]
        d2 = d_min * d_min
        h = (c * c).sum(axis=1) - d2 + relax * ((dp * dp).sum(axis=1) - d2)
        return np.exp(-h)

    return BarrierSpec(name or f"collision_{other // 5}", value, lambda Z: parts(Z)[1],
                       lambda Z: parts(Z)[2], gamma, levels or (gamma, 1.0), support=cols,
                       noise_support=noise_support,
                       meta={"d_min": d_min, "horizon": horizon, "relax": relax}, jet=parts)
