import json
import pickle

import numpy as np
import pytest

import riskgate.harness as harness
from riskgate.harness import (
    TrialFault,
    default_workers,
    estimate_eta,
    render_table,
    run_batch,
    summarize,
    wilson_interval,
    write_results,
)
from riskgate.risk import scbf_risk_bound
from riskgate.scenarios import build_scenario
from riskgate.sde import IntegrationFault


def small_robot(name="robot_scbf", *extra):
    return build_scenario(name, ["mc.N=40", "mc.chunk=15", "mc.T=0.2", *extra])


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and hi == pytest.approx(0.0370, abs=1e-4)
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4) and hi == pytest.approx(0.5962, abs=1e-4)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_default_workers(monkeypatch):
    monkeypatch.delenv("RISKGATE_WORKERS", raising=False)
    assert default_workers() == 1
    monkeypatch.setenv("RISKGATE_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("RISKGATE_WORKERS", "zero")
    with pytest.raises(ValueError):
        default_workers()


def test_batch_independent_of_workers_and_chunking():
    sc = small_robot()
    a = run_batch(sc, workers=1)
    b = run_batch(sc, workers=2)
    c = run_batch(small_robot("robot_scbf", "mc.chunk=7"), workers=1)
    assert a.to_json() == b.to_json()
    assert a.trials_digest() == c.trials_digest()


def test_batch_fields():
    r = run_batch(small_robot(), workers=1)
    assert r.N == 40 and r.max_barrier.shape == (40, 1)
    assert r.outcome_counts() == {"safe": 40, "unsafe": 0}
    d = json.loads(r.to_json())
    assert d["rho"] == 0.0 and d["theory"]["branch"] == "alpha>=beta"
    assert "workers" not in d
    assert r.maxb_csv().splitlines()[0] == "trial,seed,barrier,maxB,stopped,tau"
    counts, edges = r.histogram("disk", bins=10)
    assert counts.sum() == 40 and edges[0] == 0.0


def test_seeds_override_changes_results():
    sc = small_robot()
    assert run_batch(sc, workers=1).trials_digest() != run_batch(sc, base_seed=1, workers=1).trials_digest()


def test_merge_tags_cover_every_trial():
    sc = build_scenario("merge", ["mc.N=3", "mc.chunk=2"])
    r = run_batch(sc, workers=1)
    assert len(r.tags) == 3
    assert sum(r.outcome_counts().values()) == 3


def test_eta_estimate_robot():
    sc = small_robot("robot_racbf")
    est = estimate_eta(sc, workers=1)
    (value,) = est.eta["disk"]
    assert 0.0 < value <= 0.006 + 1e-12
    assert est.to_csv().splitlines()[0].startswith("barrier")


def test_eta_zero_without_noise():
    sc = small_robot("robot_racbf", "noise.sigma=0.0")
    assert estimate_eta(sc, N=1, workers=1).eta["disk"] == [0.0]


def test_eta_monotone_in_trials():
    sc = small_robot("robot_racbf")
    few = estimate_eta(sc, N=5, workers=1).eta["disk"][0]
    many = estimate_eta(sc, N=40, workers=1).eta["disk"][0]
    assert many >= few


def test_eta_unvisited_level_warns():
    sc = small_robot("robot_racbf")
    with pytest.warns(UserWarning, match="never visited"):
        est = estimate_eta(sc, N=2, levels=[0.3, 1.0], workers=1)
    assert est.eta["disk"][0] is None and est.eta["disk"][1] is not None


def test_trial_fault_is_reported(monkeypatch):
    def boom(*args, **kwargs):
        raise IntegrationFault("non-finite", np.zeros(2), lane=3, step=7)

    monkeypatch.setattr(harness, "simulate_lanes", boom)
    sc = small_robot()
    with pytest.raises(TrialFault) as info:
        run_batch(sc, workers=1)
    assert info.value.trial == 3
    assert info.value.seed == harness.derive_seed(sc.base_seed, 3)
    again = pickle.loads(pickle.dumps(info.value))
    assert (again.trial, again.seed, str(again)) == (3, info.value.seed, str(info.value))


def test_write_results_layout(tmp_path):
    r = run_batch(small_robot(), workers=1)
    est = estimate_eta(small_robot(), N=3, workers=1)
    out = write_results(r, tmp_path, eta=est, stamp="run1")
    assert out == tmp_path / r.scenario / "run1"
    assert sorted(p.name for p in out.iterdir()) == ["batch.json", "eta.csv", "maxB.csv"]
    assert json.loads((out / "batch.json").read_text())["N"] == 40


def test_summarize():
    r = run_batch(small_robot(), workers=1)
    s = summarize([r])
    row = s["rows"][0]
    assert row["predicted_rho"] == pytest.approx(scbf_risk_bound(0.1, 0.01, 0.5, 0.2), abs=1e-15)
    assert row["measured_rho"] == 0.0
    assert s["csv"].splitlines()[0].startswith("scenario,N,predicted_rho,measured_rho")
    assert "robot" in render_table(s["rows"])
    with pytest.raises(ValueError):
        summarize([])


def test_run_batch_rejects_empty():
    with pytest.raises(ValueError):
        run_batch(small_robot(), N=0)
