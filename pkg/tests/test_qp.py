import numpy as np
import pytest

from oracles import enumerate_qp, random_qp
from riskgate.qp import (
    FALLBACK_WEIGHT,
    CbfQpProblem,
    kkt_residuals,
    objective,
    solve_cbf_qp,
    solve_cbf_qp_batch,
)


def test_single_row_example():
    sol = solve_cbf_qp(CbfQpProblem([1.0], [[1.0]], [-0.5]))
    assert sol.status == "optimal"
    assert sol.u[0] == pytest.approx(0.5, abs=1e-14)
    assert sol.row_multipliers[0] == pytest.approx(0.5, abs=1e-14)


def test_projection_example():
    sol = solve_cbf_qp(CbfQpProblem([2.0, 0.0], [[1.0, 1.0]], [-1.0]))
    assert np.allclose(sol.u, [1.5, -0.5], atol=1e-14)


def test_inactive_row_returns_nominal():
    sol = solve_cbf_qp(CbfQpProblem([0.2, 0.3], [[1.0, 0.0]], [-1.0], u_lo=[-1, -1], u_hi=[1, 1]))
    assert np.array_equal(sol.u, [0.2, 0.3])
    assert sol.iterations == 0


def test_box_clipping():
    sol = solve_cbf_qp(CbfQpProblem([5.0, -5.0], np.zeros((0, 2)), [], u_lo=[-1, -1], u_hi=[1, 1]))
    assert np.allclose(sol.u, [1.0, -1.0])
    assert sol.box_multipliers[0, 1] == pytest.approx(4.0)
    assert sol.box_multipliers[1, 0] == pytest.approx(4.0)


def test_soft_row_slack():
    # u <= -1 softened: min (u-0)^2/2 + w d^2/2 s.t. u + 1 - d <= 0
    w = 4.0
    sol = solve_cbf_qp(CbfQpProblem([0.0], [[1.0]], [1.0], c=[-1.0], slack_weight=w))
    assert sol.u[0] == pytest.approx(-w / (1 + w))
    assert sol.delta == pytest.approx(1 / (1 + w))


def test_idempotent():
    rng = np.random.default_rng(10)
    for _ in range(200):
        p = random_qp(rng)
        s = solve_cbf_qp(p)
        if s.status != "optimal" or np.any(p.c != 0):
            continue
        again = solve_cbf_qp(CbfQpProblem(s.u, p.A, p.b, p.c, p.u_lo, p.u_hi, p.slack_weight))
        assert np.allclose(again.u, s.u, atol=1e-10)


def test_infeasible_fallback_minimizes_violation():
    # u >= 3 and u <= -3 with box [-1, 1]: best worst-case violation is at u = 0
    p = CbfQpProblem([0.5], [[-1.0], [1.0]], [3.0, 3.0], u_lo=[-1.0], u_hi=[1.0])
    s = solve_cbf_qp(p)
    assert s.status == "infeasible"
    assert s.u[0] == pytest.approx(0.0, abs=1e-6)
    assert s.max_violation == pytest.approx(3.0, abs=1e-6)
    # single hard row beyond the box: push to the box edge
    s = solve_cbf_qp(CbfQpProblem([0.0], [[-1.0]], [2.0], u_lo=[-1.0], u_hi=[1.0]))
    assert s.status == "infeasible"
    assert s.u[0] == pytest.approx(1.0, abs=1e-6)
    assert s.max_violation == pytest.approx(1.0, abs=1e-6)
    assert FALLBACK_WEIGHT == 1e8


def test_batch_lanes_independent():
    rng = np.random.default_rng(11)
    N, m, r = 7, 2, 3
    u = rng.normal(size=(N, m))
    A = rng.normal(size=(N, r, m))
    b = rng.normal(size=(N, r))
    batch = solve_cbf_qp_batch(u, A, b, None, -np.ones(m) * 2, np.ones(m) * 2)
    for i in range(N):
        one = solve_cbf_qp(CbfQpProblem(u[i], A[i], b[i], None, -np.ones(m) * 2, np.ones(m) * 2))
        assert np.array_equal(batch.u[i], one.u)


def test_problem_validation():
    with pytest.raises(ValueError):
        CbfQpProblem([0.0], [[1.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        CbfQpProblem([0.0], [[1.0]], [1.0], u_lo=[1.0], u_hi=[0.0])
    with pytest.raises(ValueError):
        CbfQpProblem([0.0], [[1.0]], [1.0], c=[-1.0], slack_weight=0.0)


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(12)
    for _ in range(300):
        p = random_qp(rng)
        s = solve_cbf_qp(p)
        ref = enumerate_qp(p)
        if ref is None:
            assert s.status == "infeasible"
            continue
        assert s.status == "optimal"
        assert max(kkt_residuals(p, s).values()) <= 1e-8
        assert abs(objective(p, s.u, s.delta) - ref[0]) <= 1e-10
