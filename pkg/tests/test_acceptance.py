"""One test per acceptance criterion. Each prints a PASS/FAIL line with the
measured numbers, visible in ``pytest -v`` output."""

import json
import math

import numpy as np
import pytest

from oracles import enumerate_qp, random_qp
from riskgate.barrier import generator
from riskgate.cli import main
from riskgate.harness import run_batch, write_results
from riskgate.models import single_integrator_model
from riskgate.qp import kkt_residuals, objective, solve_cbf_qp
from riskgate.risk import erf, erf_inv
from riskgate.scenarios import build_scenario
from riskgate.scenarios.barriers import robot_barrier
from riskgate.sde import euler_maruyama_step

BOUND_TOL = 1e-3


@pytest.fixture
def report(capsys):
    def emit(criterion: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def cli_json(capsys, *argv):
    code = main(list(argv))
    out, _ = capsys.readouterr()
    assert code == 0
    return json.loads(out)


@pytest.fixture(scope="module")
def scbf_batch():
    return run_batch(build_scenario("robot_scbf"), N=10_000, workers=1)


@pytest.fixture(scope="module")
def racbf_batches():
    out = {}
    for rho_d in (0.01, 0.505):
        sc = build_scenario("robot_racbf", [f"barriers.0.filter.rho_d=[{rho_d}]"])
        out[rho_d] = run_batch(sc, N=10_000, workers=1)
    return out


def test_c01_scbf_bound_values(capsys, report):
    got = []
    for alpha, beta, want in ((0.1, 0.01, 0.505), (10.0, 4.0, 0.990)):
        rec = cli_json(capsys, "bounds", "scbf", "--alpha", str(alpha), "--beta", str(beta),
                       "--gamma", "0.5", "--T", "1")
        got.append((rec["value"], want))
    ok = all(abs(v - w) <= BOUND_TOL for v, w in got)
    report(1, ok, ", ".join(f"{v:.6f} vs {w}" for v, w in got) + f" (tol {BOUND_TOL})")
    assert ok


def test_c02_cascade_per_level_risks(capsys, report):
    cases = {
        "road": ("0.012,0.025,0.035,0.046,0.067", (0.046, 0.153, 0.277, 0.456)),
        "collision": ("0.018,0.031,0.049,0.063,0.076", (0.107, 0.308, 0.427, 0.511)),
    }
    ok = True
    parts = []
    for name, (etas, want) in cases.items():
        rec = cli_json(capsys, "bounds", "cascade", "--levels", "0,0.2,0.4,0.6,0.8,1", "--etas", etas, "--T", "4")
        got = rec["value"][1:]
        err = max(abs(g - w) for g, w in zip(got, want))
        ok &= err <= BOUND_TOL
        parts.append(f"{name} " + "/".join(f"{g:.4f}" for g in got) + f" (max err {err:.1e})")
    report(2, ok, "; ".join(parts))
    assert ok


def test_c03_robot_scbf_no_exits(scbf_batch, report):
    r = scbf_batch
    ok = r.unsafe == 0
    report(3, ok, f"N={r.N} unsafe={r.unsafe} (need 0), median maxB {np.median(r.max_barrier):.4f}")
    assert ok


def test_c04_robot_racbf_measured_risk(racbf_batches, report):
    lo_batch, hi_batch = racbf_batches[0.01], racbf_batches[0.505]
    ok_lo = lo_batch.rho <= 0.003
    ok_hi = 0.40 <= hi_batch.rho <= 0.52
    report(4, ok_lo and ok_hi,
           f"rho_d=0.01 -> {lo_batch.rho:.4f} (need <= 0.003, {'ok' if ok_lo else 'fail'}); "
           f"rho_d=0.505 -> {hi_batch.rho:.4f} (need [0.40, 0.52], {'ok' if ok_hi else 'fail'})")
    assert ok_lo, "rho_d = 0.01 row"
    assert ok_hi, "rho_d = 0.505 row"


def test_c05_racbf_runs_closer_to_boundary(scbf_batch, racbf_batches, report):
    ms = float(np.median(scbf_batch.max_barrier[:, 0]))
    mr = float(np.median(racbf_batches[0.01].max_barrier[:, 0]))
    ok = mr > ms
    report(5, ok, f"median max B RA-CBF {mr:.4f} vs S-CBF {ms:.4f}")
    assert ok


def test_c06_wiener_crossing_probability(report):
    exact = erf(1.0 / math.sqrt(2.0))
    bridge = run_batch(build_scenario("wiener"), workers=1)
    grid = run_batch(build_scenario("wiener", ['mc.exit_test="grid"']), workers=1)
    stay, stay_grid = 1.0 - bridge.rho, 1.0 - grid.rho
    ok = abs(stay - exact) <= 0.01
    report(6, ok, f"N={bridge.N} stay {stay:.5f} vs {exact:.5f} (grid-only monitoring {stay_grid:.5f})")
    assert ok


def test_c07_generator_matches_monte_carlo(report):
    sigma, dt, M = 0.003, 1e-4, 1_000_000
    model = single_integrator_model(sigma, sigma)
    barrier = robot_barrier()
    # the one-step difference carries a deterministic bias u^T hess(B) u dt / 2
    # = |u|^2 dt; points keep it below 0.2 standard errors (|x| >= 0.3, |u| <= 0.5)
    points = [((0.7071, 0.0), (0.3, 0.3)), ((0.0, 0.5), (0.5, 0.0)), ((0.3, -0.4), (-0.2, 0.4)),
              ((-0.6, 0.6), (0.0, -0.5)), ((0.9, 0.1), (0.1, -0.1))]
    rng = np.random.default_rng(20240607)
    worst = 0.0
    for x, u in points:
        assert np.dot(u, u) * dt < 0.2 * 2 * np.linalg.norm(x) * sigma / math.sqrt(dt * M)
        X = np.tile(x, (M, 1))
        U = np.tile(u, (M, 1))
        Xn = euler_maruyama_step(model, X, U, dt, rng.standard_normal((M, 2)))
        diff = (barrier.value(Xn) - barrier.value(X[:1])[0]) / dt
        est, se = diff.mean(), diff.std(ddof=1) / math.sqrt(M)
        worst = max(worst, abs(est - generator(model, barrier, x, u)) / se)
    ok = worst <= 3.0
    report(7, ok, f"worst |MC - generator| = {worst:.2f} SE over 5 points (need <= 3)")
    assert ok


def test_c08_qp_matches_enumeration(report):
    rng = np.random.default_rng(20240608)
    worst_kkt = worst_gap = 0.0
    mismatched = 0
    for _ in range(1000):
        p = random_qp(rng)
        s = solve_cbf_qp(p)
        ref = enumerate_qp(p)
        if ref is None:
            mismatched += s.status != "infeasible"
            continue
        if s.status != "optimal":
            mismatched += 1
            continue
        worst_kkt = max(worst_kkt, max(kkt_residuals(p, s).values()))
        worst_gap = max(worst_gap, abs(objective(p, s.u, s.delta) - ref[0]))
    ok = mismatched == 0 and worst_kkt <= 1e-8 and worst_gap <= 1e-10
    report(8, ok, f"1000 problems: status mismatches {mismatched}, max KKT {worst_kkt:.1e}, "
                  f"max objective gap {worst_gap:.1e}")
    assert ok


def test_c09_erf_round_trip(report):
    p = np.concatenate([np.linspace(-0.999999, 0.999999, 9_990),
                        [1 - 1e-9, -(1 - 1e-9), 1 - 1e-10, 1 - 1e-12, 1 - 1e-14, 1e-12, -1e-12, 0.0, 0.5, -0.5]])
    err = max(abs(erf(float(erf_inv(v))) - v) for v in p)
    half = erf_inv(0.5)
    ok = len(p) == 10_000 and err <= 1e-10 and abs(half - 0.476936) <= 1e-6
    report(9, ok, f"max round-trip error {err:.1e} on {len(p)} points, erf_inv(0.5) = {half:.9f}")
    assert ok


def test_c10_merge_study(report):
    tight = run_batch(build_scenario("merge"), N=200, workers=1)
    loose = run_batch(build_scenario("merge_rho12"), N=200, workers=1)
    merged = sum(v for k, v in tight.outcome_counts().items() if k.startswith("merged"))
    lc = loose.outcome_counts()
    ok_tight = tight.unsafe == 0 and merged >= 0.95 * tight.N
    ok_loose = loose.rho > tight.rho and lc.get("merged_behind", 0) > 0 and lc.get("merged_ahead", 0) > 0
    report(10, ok_tight and ok_loose,
           f"merge: exits {tight.unsafe}, merged {merged}/{tight.N} {tight.outcome_counts()}; "
           f"merge_rho12: unsafe {loose.rho:.3f} > {tight.rho:.3f}, outcomes {lc}")
    assert ok_tight
    assert ok_loose


def test_c11_worker_count_does_not_change_output(scbf_batch, tmp_path, report):
    again = run_batch(build_scenario("robot_scbf"), N=10_000, workers=8)
    a = (write_results(scbf_batch, tmp_path / "w1", stamp="run") / "batch.json").read_bytes()
    b = (write_results(again, tmp_path / "w8", stamp="run") / "batch.json").read_bytes()
    ok = a == b
    report(11, ok, f"workers 1 vs 8 batch.json identical: {ok} ({len(a)} bytes, "
                   f"trials sha256 {scbf_batch.trials_digest()[:12]})")
    assert ok
