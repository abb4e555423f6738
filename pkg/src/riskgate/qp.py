"""Small dense QP solver for CBF safety filters.

Solves, lane by lane,

    min_z  1/2 (z - z0)^T D (z - z0)   s.t.  C z <= e

with ``D`` a positive diagonal. The method is the dual active-set scheme of
Goldfarb and Idnani: start at the unconstrained minimizer, add the most
violated constraint, take full or partial steps that keep every multiplier
nonnegative, and drop constraints whose multiplier reaches zero. It needs no
feasible starting point and detects infeasibility when a violated constraint
can be neither satisfied nor traded against an active one.

Lanes iterate in lock-step; each lane only ever touches its own data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2
STATUS_NAMES = {OPTIMAL: "optimal", INFEASIBLE: "infeasible", MAX_ITER: "max_iter"}

FALLBACK_WEIGHT = 1e8


def solve_diagonal_qp(z0: np.ndarray, D: np.ndarray, C: np.ndarray, e: np.ndarray, max_iter: int | None = None):
    """Batched dual active-set solve.

    Parameters
    ----------
    z0 : (N, d) unconstrained minimizers
    D : (d,) positive diagonal of the Hessian
    C : (N, K, d) constraint normals
    e : (N, K) right-hand sides

    Returns ``(z, lam, status, iterations)`` with multipliers ``lam >= 0``.
    """
    z = np.array(z0, dtype=float)
    N, d = z.shape
    K = C.shape[1]
    Dinv = 1.0 / np.asarray(D, dtype=float)
    lam = np.zeros((N, K))
    status = np.full(N, OPTIMAL)
    iters = np.zeros(N, dtype=np.int64)
    if K == 0:
        return z, lam, status, iters
    CD = C * Dinv
    M = (C[:, :, None, :] * CD[:, None, :, :]).sum(axis=3)
    active = np.zeros((N, K), dtype=bool)
    p = np.full(N, -1)
    done = np.zeros(N, dtype=bool)
    feas_tol = 1e-11 * (1.0 + np.abs(e))
    eye = np.eye(K)
    limit = max_iter if max_iter is not None else 8 * K + 20

    for _ in range(limit):
        # lanes that need a new constraint to work on
        pick = np.flatnonzero(~done & (p < 0))
        if pick.size:
            viol = (C[pick] * z[pick, None, :]).sum(axis=2) - e[pick]
            viol = np.where(active[pick], -np.inf, viol)
            worst = np.argmax(viol, axis=1)
            wv = viol[np.arange(pick.size), worst]
            finished = wv <= feas_tol[pick, worst]
            done[pick[finished]] = True
            p[pick[~finished]] = worst[~finished]
        work = np.flatnonzero(~done)
        if work.size == 0:
            break
        iters[work] += 1
        pw = p[work]
        act = active[work]
        Mw = M[work]
        rows = np.arange(work.size)
        both = act[:, :, None] & act[:, None, :]
        Ms = np.where(both, Mw, 0.0) + eye * (~act)[:, :, None]
        rhs = np.where(act, Mw[rows, :, pw], 0.0)
        r = np.linalg.solve(Ms, rhs[:, :, None])[:, :, 0]
        r = np.where(act, r, 0.0)
        Cw = C[work]
        n_p = Cw[rows, pw]
        dz = Dinv * (n_p - (r[:, :, None] * Cw).sum(axis=1))
        curv = (n_p * dz).sum(axis=1)
        scale = (n_p * n_p * Dinv).sum(axis=1)
        primal_ok = (curv > 1e-10 * scale) & (act.sum(axis=1) < d)
        gap = (n_p * z[work]).sum(axis=1) - e[work, pw]
        t1 = np.where(primal_ok, gap / np.where(primal_ok, curv, 1.0), np.inf)
        lw = lam[work]
        ratio = np.where(act & (r > 1e-14), lw / np.where(r > 1e-14, r, 1.0), np.inf)
        kdrop = np.argmin(ratio, axis=1)
        t2 = ratio[rows, kdrop]
        infeasible = ~np.isfinite(t1) & ~np.isfinite(t2)
        full = (t1 <= t2) & ~infeasible
        t = np.where(full, t1, t2)
        t = np.where(infeasible, 0.0, t)

        z_new = z[work] - np.where(primal_ok, t, 0.0)[:, None] * dz
        lam_new = lw - t[:, None] * r
        lam_new[rows, pw] += t
        lam_new = np.where(act | (np.arange(K) == pw[:, None]), np.maximum(lam_new, 0.0), 0.0)
        act_new = act.copy()
        act_new[rows[full], pw[full]] = True
        partial = ~full & ~infeasible
        act_new[rows[partial], kdrop[partial]] = False
        lam_new[rows[partial], kdrop[partial]] = 0.0

        z[work] = z_new
        lam[work] = lam_new
        active[work] = act_new
        p_new = np.where(full, -1, pw)
        p[work] = p_new
        if infeasible.any():
            bad = work[infeasible]
            status[bad] = INFEASIBLE
            done[bad] = True
    else:
        status[~done] = MAX_ITER
    return z, lam, status, iters


@dataclass
class CbfQpProblem:
    """``min 1/2 |u - u0|^2 + 1/2 w delta^2`` s.t. ``A u + b + c delta <= 0``
    and ``u_lo <= u <= u_hi``."""

    u_nom: np.ndarray
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray | None = None
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    slack_weight: float = 1e4

    def __post_init__(self):
        self.u_nom = np.asarray(self.u_nom, dtype=float).reshape(-1)
        m = self.u_nom.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, m)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        r = self.A.shape[0]
        self.c = np.zeros(r) if self.c is None else np.asarray(self.c, dtype=float).reshape(-1)
        self.u_lo = np.full(m, -np.inf) if self.u_lo is None else np.asarray(self.u_lo, dtype=float).reshape(m)
        self.u_hi = np.full(m, np.inf) if self.u_hi is None else np.asarray(self.u_hi, dtype=float).reshape(m)
        if self.b.size != r or self.c.size != r:
            raise ValueError("A, b and c must describe the same number of rows")
        if np.any(self.u_lo > self.u_hi):
            raise ValueError("box bounds must satisfy u_lo <= u_hi")
        if np.any(self.c != 0) and not self.slack_weight > 0:
            raise ValueError("slack weight must be positive when any row is softened")


@dataclass
class QpSolution:
    u: np.ndarray
    delta: float
    status: str
    row_multipliers: np.ndarray
    box_multipliers: np.ndarray  # (m, 2): lower, upper
    iterations: int
    max_violation: float = 0.0


@dataclass
class QpBatchSolution:
    u: np.ndarray  # (N, m)
    delta: np.ndarray  # (N,)
    status: np.ndarray  # (N,) int codes
    row_multipliers: np.ndarray  # (N, r)
    box_multipliers: np.ndarray  # (N, m, 2)
    iterations: np.ndarray
    max_violation: np.ndarray  # (N,) largest hard-row violation (0 when optimal)

    @property
    def infeasible(self) -> np.ndarray:
        return self.status != OPTIMAL


def _box_rows(u_lo: np.ndarray, u_hi: np.ndarray, d: int):
    m = u_lo.size
    normals, rhs, which = [], [], []
    for j in range(m):
        if np.isfinite(u_lo[j]):
            v = np.zeros(d)
            v[j] = -1.0
            normals.append(v)
            rhs.append(-u_lo[j])
            which.append((j, 0))
        if np.isfinite(u_hi[j]):
            v = np.zeros(d)
            v[j] = 1.0
            normals.append(v)
            rhs.append(u_hi[j])
            which.append((j, 1))
    return np.array(normals).reshape(-1, d), np.array(rhs), which


def solve_cbf_qp_batch(u_nom, A, b, c=None, u_lo=None, u_hi=None, slack_weight: float = 1e4) -> QpBatchSolution:
    """Batched CBF-QP. ``u_nom`` (N, m), ``A`` (N, r, m), ``b`` (N, r),
    ``c`` (r,) shared by all lanes. Box bounds are shared (m,).

    Lanes whose hard rows conflict with the box get ``status = INFEASIBLE``
    and the control that minimizes the largest hard-row violation (ties
    broken toward ``u_nom``), computed by re-solving with one shared
    violation variable of weight ``FALLBACK_WEIGHT``.
    """
    u_nom = np.asarray(u_nom, dtype=float)
    N, m = u_nom.shape
    A = np.asarray(A, dtype=float).reshape(N, -1, m)
    r = A.shape[1]
    b = np.asarray(b, dtype=float).reshape(N, r)
    c = np.zeros(r) if c is None else np.asarray(c, dtype=float).reshape(r)
    u_lo = np.full(m, -np.inf) if u_lo is None else np.asarray(u_lo, dtype=float)
    u_hi = np.full(m, np.inf) if u_hi is None else np.asarray(u_hi, dtype=float)
    soft = bool(np.any(c != 0))
    d = m + 1 if soft else m
    D = np.ones(d)
    if soft:
        D[m] = slack_weight
    z0 = np.zeros((N, d))
    z0[:, :m] = u_nom
    box_n, box_e, which = _box_rows(u_lo, u_hi, d)
    nb = len(which)
    C = np.zeros((N, r + nb, d))
    C[:, :r, :m] = A
    if soft:
        C[:, :r, m] = c
    C[:, r:, :] = box_n
    e = np.empty((N, r + nb))
    e[:, :r] = -b
    e[:, r:] = box_e
    z, lam, status, iters = solve_diagonal_qp(z0, D, C, e)

    max_violation = np.zeros(N)
    bad = np.flatnonzero(status == INFEASIBLE)
    if bad.size:
        hard = c == 0
        d2 = d + 1
        D2 = np.append(D, FALLBACK_WEIGHT)
        C2 = np.zeros((bad.size, r + nb, d2))
        C2[:, :, :d] = C[bad]
        C2[:, :r, d] = np.where(hard, -1.0, 0.0)
        z02 = np.zeros((bad.size, d2))
        z02[:, :d] = z0[bad]
        z2, lam2, status2, it2 = solve_diagonal_qp(z02, D2, C2, e[bad])
        z[bad] = z2[:, :d]
        lam[bad] = lam2
        iters[bad] += it2
        max_violation[bad] = np.maximum(z2[:, d], 0.0)
        status[bad[status2 != OPTIMAL]] = MAX_ITER

    box_mult = np.zeros((N, m, 2))
    for col, (j, side) in enumerate(which):
        box_mult[:, j, side] = lam[:, r + col]
    delta = z[:, m] if soft else np.zeros(N)
    return QpBatchSolution(
        u=z[:, :m], delta=delta, status=status, row_multipliers=lam[:, :r],
        box_multipliers=box_mult, iterations=iters, max_violation=max_violation,
    )


def solve_cbf_qp(problem: CbfQpProblem) -> QpSolution:
    """Solve one CBF-QP."""
    sol = solve_cbf_qp_batch(
        problem.u_nom[None, :], problem.A[None, :, :], problem.b[None, :], problem.c,
        problem.u_lo, problem.u_hi, problem.slack_weight,
    )
    return QpSolution(
        u=sol.u[0], delta=float(sol.delta[0]), status=STATUS_NAMES[int(sol.status[0])],
        row_multipliers=sol.row_multipliers[0], box_multipliers=sol.box_multipliers[0],
        iterations=int(sol.iterations[0]), max_violation=float(sol.max_violation[0]),
    )


def kkt_residuals(problem: CbfQpProblem, sol: QpSolution) -> dict[str, float]:
    """Stationarity, primal/dual feasibility and complementarity residuals."""
    u, delta = sol.u, sol.delta
    soft = bool(np.any(problem.c != 0))
    lam = sol.row_multipliers
    lo_mult = sol.box_multipliers[:, 0]
    hi_mult = sol.box_multipliers[:, 1]
    lo_mult = np.where(np.isfinite(problem.u_lo), lo_mult, 0.0)
    hi_mult = np.where(np.isfinite(problem.u_hi), hi_mult, 0.0)
    grad_u = (u - problem.u_nom) + problem.A.T @ lam - lo_mult + hi_mult
    stat = float(np.max(np.abs(grad_u), initial=0.0))
    if soft:
        stat = max(stat, abs(problem.slack_weight * delta + problem.c @ lam))
    g_rows = problem.A @ u + problem.b + problem.c * delta
    g_lo = np.where(np.isfinite(problem.u_lo), problem.u_lo - u, -np.inf)
    g_hi = np.where(np.isfinite(problem.u_hi), u - problem.u_hi, -np.inf)
    primal = float(max(np.max(g_rows, initial=0.0), np.max(g_lo, initial=0.0), np.max(g_hi, initial=0.0), 0.0))
    dual = float(max(0.0, -np.min(np.concatenate([lam, lo_mult, hi_mult]), initial=0.0)))
    comp = float(np.max(np.abs(np.concatenate([
        lam * g_rows,
        np.where(np.isfinite(g_lo), lo_mult * g_lo, 0.0),
        np.where(np.isfinite(g_hi), hi_mult * g_hi, 0.0),
    ])), initial=0.0))
    return {"stationarity": stat, "primal": primal, "dual": dual, "complementarity": comp}


def objective(problem: CbfQpProblem, u: np.ndarray, delta: float = 0.0) -> float:
    du = np.asarray(u) - problem.u_nom
    return 0.5 * float(du @ du) + 0.5 * problem.slack_weight * delta * delta
