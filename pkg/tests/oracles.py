"""Independent reference computations used by the tests."""

import itertools

import numpy as np

from riskgate.qp import CbfQpProblem


def enumerate_qp(problem: CbfQpProblem):
    """Brute-force active-set enumeration of the CBF-QP.

    Solves the equality-constrained KKT system for every subset of
    constraints and keeps the best primal/dual feasible point. Returns
    ``(objective, z)`` with ``z = (u, delta)`` or None when infeasible.
    """
    m = problem.u_nom.size
    soft = bool(np.any(problem.c != 0))
    d = m + 1 if soft else m
    D = np.ones(d)
    if soft:
        D[m] = problem.slack_weight
    rows, rhs = [], []
    for i in range(problem.A.shape[0]):
        v = np.zeros(d)
        v[:m] = problem.A[i]
        if soft:
            v[m] = problem.c[i]
        rows.append(v)
        rhs.append(-problem.b[i])
    for j in range(m):
        for sign, bound in ((-1.0, problem.u_lo[j]), (1.0, problem.u_hi[j])):
            if np.isfinite(bound):
                v = np.zeros(d)
                v[j] = sign
                rows.append(v)
                rhs.append(sign * bound)
    C = np.array(rows).reshape(-1, d)
    e = np.array(rhs)
    z0 = np.zeros(d)
    z0[:m] = problem.u_nom
    best = None
    for k in range(0, min(d, len(e)) + 1):
        for subset in itertools.combinations(range(len(e)), k):
            S = list(subset)
            Cs = C[S]
            kkt = np.block([[np.diag(D), Cs.T], [Cs, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(kkt, np.concatenate([D * z0, e[S]]))
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:d], sol[d:]
            if np.all(C @ z <= e + 1e-9) and np.all(lam >= -1e-9):
                f = 0.5 * float(np.sum(D * (z - z0) ** 2))
                if best is None or f < best[0]:
                    best = (f, z)
    return best


def random_qp(rng: np.random.Generator) -> CbfQpProblem:
    """Random small CBF-QP: 1-4 controls, 0-6 rows, box [-2, 2], some soft rows."""
    m = int(rng.integers(1, 5))
    r = int(rng.integers(0, 7))
    soft = rng.random() < 0.3
    c = np.where(rng.random(r) < 0.5, -1.0, 0.0) if soft else None
    return CbfQpProblem(rng.normal(0, 3, m), rng.normal(size=(r, m)), rng.normal(size=r), c,
                        -np.full(m, 2.0), np.full(m, 2.0), 10.0)
