"""Closed-form risk bounds for stochastic and risk-aware barrier functions.

Everything here is a pure scalar function. Probabilities that come out of a
formula slightly outside [0, 1] are clamped and the clamp is logged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class AdmissibilityError(ValueError):
    """Requested risk lies below the minimum the barrier can certify."""


class CascadeError(ValueError):
    """Malformed cascade of sub-level sets."""


# ----------------------------------------------------------------------------
# error function and its inverse
# ----------------------------------------------------------------------------

_erf_vec = np.frompyfunc(math.erf, 1, 1)
_erfc_vec = np.frompyfunc(math.erfc, 1, 1)


def erf(x):
    """Gauss error function for scalars or arrays."""
    if np.ndim(x) == 0:
        return math.erf(float(x))
    return _erf_vec(np.asarray(x, dtype=float)).astype(float)


def erfc(x):
    """Complementary error function, accurate in the far tail."""
    if np.ndim(x) == 0:
        return math.erfc(float(x))
    return _erfc_vec(np.asarray(x, dtype=float)).astype(float)


def _giles_guess(w: float) -> float:
    # Giles (2010) single-precision approximation of erfinv(p)/p, with
    # w = -log((1-p)(1+p)).
    if w < 5.0:
        w -= 2.5
        p = 2.81022636e-08
        p = 3.43273939e-07 + p * w
        p = -3.5233877e-06 + p * w
        p = -4.39150654e-06 + p * w
        p = 0.00021858087 + p * w
        p = -0.00125372503 + p * w
        p = -0.00417768164 + p * w
        p = 0.246640727 + p * w
        p = 1.50140941 + p * w
    else:
        w = math.sqrt(w) - 3.0
        p = -0.000200214257
        p = 0.000100950558 + p * w
        p = 0.00134934322 + p * w
        p = -0.00367342844 + p * w
        p = 0.00573950773 + p * w
        p = -0.0076224613 + p * w
        p = 0.00943887047 + p * w
        p = 1.00167406 + p * w
        p = 2.83297682 + p * w
    return p


def _erfc_inv_tail(q: float) -> float:
    """Solve erfc(x) = q for 0 < q <= 0.5 (so x >= ~0.4769)."""
    w = -math.log(q * (2.0 - q))
    if w < 36.0:
        x = _giles_guess(w) * (1.0 - q)
    else:
        # asymptotic start: erfc(x) ~ exp(-x^2) / (x sqrt(pi))
        x = math.sqrt(-math.log(q))
        for _ in range(3):
            x = math.sqrt(-math.log(q) - math.log(x * math.sqrt(math.pi)))
    # Newton on log(erfc(x)) keeps relative accuracy deep in the tail.
    logq = math.log(q)
    for _ in range(6):
        ec = math.erfc(x)
        if ec <= 0.0:
            break
        step = (math.log(ec) - logq) / (-_TWO_OVER_SQRT_PI * math.exp(-x * x) / ec)
        x -= step
        if abs(step) <= 1e-15 * max(1.0, abs(x)):
            break
    return x


def erf_inv(p):
    """Inverse error function on (-1, 1).

    Giles' rational starting guess, polished by Newton steps on ``erf`` near
    the center and on ``log(erfc)`` in the tails.
    """
    if np.ndim(p) != 0:
        return np.vectorize(erf_inv, otypes=[float])(p)
    p = float(p)
    if not (-1.0 < p < 1.0):
        raise ValueError(f"erf_inv requires |p| < 1, got {p!r}")
    if p == 0.0:
        return 0.0
    if abs(p) > 0.5:
        x = _erfc_inv_tail(1.0 - abs(p))
        return math.copysign(x, p)
    x = _giles_guess(-math.log((1.0 - p) * (1.0 + p))) * p
    for _ in range(2):
        x -= (math.erf(x) - p) / (_TWO_OVER_SQRT_PI * math.exp(-x * x))
    return x


def erfc_inv(q):
    """Inverse of erfc on (0, 2); ``erfc_inv(q) == erf_inv(1 - q)`` without
    the cancellation for small q."""
    if np.ndim(q) != 0:
        return np.vectorize(erfc_inv, otypes=[float])(q)
    q = float(q)
    if not (0.0 < q < 2.0):
        raise ValueError(f"erfc_inv requires 0 < q < 2, got {q!r}")
    if q <= 0.5:
        return _erfc_inv_tail(q)
    if q >= 1.5:
        return -_erfc_inv_tail(2.0 - q)
    return erf_inv(1.0 - q)


def _clamp_probability(value: float, what: str) -> float:
    if value > 1.0 or value < 0.0:
        clamped = min(1.0, max(0.0, value))
        logger.info("clamped %s from %.6g to %.6g", what, value, clamped)
        return clamped
    return value


# ----------------------------------------------------------------------------
# parameter containers
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskParams:
    gamma: float
    eta: float
    T: float
    rho_d: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.eta < 0.0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if self.T <= 0.0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0.0 <= self.rho_d <= 1.0:
            raise ValueError(f"rho_d must lie in [0, 1], got {self.rho_d}")

    @property
    def min_risk(self) -> float:
        return racbf_min_risk(self.gamma, self.eta, self.T)

    def check_admissible(self, level_gap: float | None = None) -> None:
        gap = 1.0 - self.gamma if level_gap is None else level_gap
        floor = min_risk_for_gap(gap, self.eta, self.T)
        if self.rho_d < floor * (1.0 - 1e-12):
            raise AdmissibilityError(
                f"rho_d={self.rho_d:.6g} is below the admissible minimum "
                f"{floor:.6g} = 1 - erf(gap/(sqrt(2) eta T)) "
                f"(gap={gap:.6g}, eta={self.eta:.6g}, T={self.T:.6g})"
            )


@dataclass(frozen=True)
class CascadeSpec:
    """Sub-level partition gamma = mu_0 < ... < mu_k = 1 with per-level
    noise strength and requested risk."""

    levels: tuple[float, ...]
    etas: tuple[float, ...]
    T: float
    rho_ds: tuple[float, ...] | None = None

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        etas = tuple(float(v) for v in self.etas)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "etas", etas)
        if self.rho_ds is not None:
            object.__setattr__(self, "rho_ds", tuple(float(v) for v in self.rho_ds))
        if len(levels) < 2:
            raise CascadeError("a cascade needs at least two levels (gamma and 1)")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise CascadeError(f"levels must be strictly ascending, got {levels}")
        if levels[0] < 0.0 or abs(levels[-1] - 1.0) > 1e-12:
            raise CascadeError(f"levels must run from gamma >= 0 up to 1, got {levels}")
        k = len(levels) - 1
        if len(etas) != k:
            raise CascadeError(f"expected {k} per-level etas, got {len(etas)}")
        if any(e < 0.0 for e in etas):
            raise CascadeError("per-level etas must be nonnegative")
        if self.T <= 0.0:
            raise CascadeError("T must be positive")
        if self.rho_ds is not None and len(self.rho_ds) != k:
            raise CascadeError(f"expected {k} per-level rho_d values, got {len(self.rho_ds)}")

    @property
    def k(self) -> int:
        return len(self.levels) - 1

    @property
    def gaps(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.levels, self.levels[1:]))

    def check_admissible(self) -> None:
        if self.rho_ds is None:
            return
        for i, (gap, eta, rho) in enumerate(zip(self.gaps, self.etas, self.rho_ds), start=1):
            floor = min_risk_for_gap(gap, eta, self.T)
            if rho < floor * (1.0 - 1e-12):
                raise AdmissibilityError(
                    f"level {i}: rho_d={rho:.6g} below admissible minimum {floor:.6g} "
                    f"(gap={gap:.6g}, eta={eta:.6g}, T={self.T:.6g})"
                )


# ----------------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------------


def scbf_risk_bound_with_branch(alpha: float, beta: float, gamma: float, T: float) -> tuple[float, str]:
    """Martingale bound on exit probability under a stochastic CBF, plus the
    name of the case that produced it."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if T <= 0:
        raise ValueError("T must be positive")
    if alpha == 0.0:
        value, branch = gamma + beta * T, "alpha=0"
    elif alpha >= beta:
        value, branch = 1.0 - (1.0 - gamma) * math.exp(-beta * T), "alpha>=beta"
    else:
        value = (gamma + math.expm1(beta * T) * beta / alpha) * math.exp(-beta * T)
        branch = "alpha<beta"
    return _clamp_probability(value, "S-CBF bound"), branch


def scbf_risk_bound(alpha: float, beta: float, gamma: float, T: float) -> float:
    return scbf_risk_bound_with_branch(alpha, beta, gamma, T)[0]


def min_risk_for_gap(gap: float, eta: float, T: float) -> float:
    """``1 - erf(gap / (sqrt(2) eta T))``; zero in the noiseless limit."""
    if T <= 0:
        raise ValueError("T must be positive")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if gap <= 0.0:
        return 1.0
    if eta == 0.0:
        return 0.0
    return math.erfc(gap / (SQRT2 * eta * T))


def racbf_min_risk(gamma: float, eta: float, T: float) -> float:
    """Smallest design risk an RA-CBF admits from initial level gamma."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return min_risk_for_gap(1.0 - gamma, eta, T)


def risk_budget(eta: float, T: float, rho_d: float) -> float:
    """Barrier headroom reserved for noise: ``sqrt(2) eta T erf^-1(1 - rho_d)``."""
    if rho_d >= 1.0 or eta == 0.0:
        return 0.0
    if rho_d <= 0.0:
        raise AdmissibilityError("rho_d must be positive when eta > 0")
    return SQRT2 * eta * T * erfc_inv(rho_d)


def racbf_h(I_L: float, params: RiskParams, level_gap: float | None = None) -> float:
    """Remaining barrier budget ``gap - sqrt(2) eta T erf^-1(1-rho_d) - I_L``."""
    gap = 1.0 - params.gamma if level_gap is None else level_gap
    params.check_admissible(gap)
    return gap - risk_budget(params.eta, params.T, params.rho_d) - I_L


def tightness_eta_threshold(gamma: float, T: float) -> float:
    """Largest eta for which the RA-CBF minimum risk beats every S-CBF bound.

    At gamma = 0 the S-CBF bound can reach 0, so no eta > 0 is tighter and
    the threshold is 0. As gamma -> 1 it tends to sqrt(2/pi)/T.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if T <= 0:
        raise ValueError("T must be positive")
    if gamma == 0.0:
        return 0.0
    if gamma == 1.0:
        return math.sqrt(2.0 / math.pi) / T
    return (1.0 - gamma) / (SQRT2 * T * erfc_inv(gamma))


# name used by the command-line contract
theorem3_eta_threshold = tightness_eta_threshold


def racbf_is_tighter(gamma: float, eta: float, T: float) -> bool:
    """Whether ``racbf_min_risk(gamma, eta, T) < gamma``, i.e. below every
    S-CBF bound."""
    return eta < tightness_eta_threshold(gamma, T)


def cascaded_risk_bound(spec: CascadeSpec) -> tuple[list[float], float]:
    """Per-level crossing risks and their product (the smallest admissible
    total design risk for the cascade)."""
    per_level = [min_risk_for_gap(g, e, spec.T) for g, e in zip(spec.gaps, spec.etas)]
    product = float(np.prod(per_level))
    return per_level, product


def wiener_sup_law(a: float, T: float) -> float:
    """P(sup_{t<=T} W_t < a) for standard Brownian motion."""
    if a <= 0 or T <= 0:
        raise ValueError("a and T must be positive")
    return math.erf(a / math.sqrt(2.0 * T))


def survival_product(survivals: Sequence[float]) -> float:
    return float(np.prod(list(survivals)))
