import math

import numpy as np
import pytest

from riskgate.risk import AdmissibilityError, CascadeError
from riskgate.scenarios import KINDS, build_scenario
from riskgate.scenarios.config import BUNDLED, ConfigError, apply_overrides, dump_config, load_config
from riskgate.scenarios.merge import MergeScenario
from riskgate.sde import derive_seed, simulate_lanes


@pytest.mark.parametrize("name", [b for b in BUNDLED if not b.startswith("merge")])
def test_bundled_configs_build(name):
    sc = build_scenario(name)
    assert sc.N >= 1 and sc.T > 0
    assert all(c.ok for c in sc.checks())


def test_overrides():
    cfg = load_config("robot_scbf")
    out = apply_overrides(cfg, ["mc.N=5", "barriers.0.filter.alpha=0.2", "scenario.name=\"x\""])
    assert out["mc"]["N"] == 5
    assert out["barriers"][0]["filter"]["alpha"] == 0.2
    assert out["scenario"]["name"] == "x"
    assert cfg["mc"]["N"] == 10000
    for bad in (["mc.NN=5"], ["mc.N"], ["barriers.3.kind=disk"], ["mc.N.x=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(cfg, bad)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["mc.N=0"])


def test_config_schema_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config({"model": {}})
    with pytest.raises(ConfigError):
        load_config("no_such_config")
    bad = tmp_path / "bad.cfg"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    cfg = load_config("robot_scbf")
    cfg["extra"] = {}
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_dump_config_round_trip():
    import json
    cfg = load_config("merge")
    assert json.loads(dump_config(cfg)) == cfg


def test_unknown_kind():
    cfg = load_config("robot_scbf")
    cfg["scenario"]["kind"] = "boat"
    with pytest.raises(ConfigError):
        build_scenario(cfg)
    assert set(KINDS) == {"robot", "wiener", "merge"}


def test_robot_gamma_mismatch():
    cfg = load_config("robot_scbf")
    cfg["barriers"][0]["gamma"] = 0.4
    with pytest.raises(ConfigError, match="does not match"):
        build_scenario(cfg)
    cfg["barriers"][0]["gamma"] = 0.5000000000000001
    assert build_scenario(cfg).gamma == pytest.approx(0.5)


def test_robot_build_errors():
    with pytest.raises(ConfigError):
        build_scenario("robot_scbf", ["model.goal=[0.5, 0.5]"])
    with pytest.raises(ConfigError):
        build_scenario("robot_scbf", ["model.x0=[1.0, 0.5]"])
    with pytest.raises(AdmissibilityError):
        build_scenario("robot_racbf", ["barriers.0.filter.eta=[0.2]"])


def test_robot_theory():
    th = build_scenario("robot_scbf").theory()
    assert th["predicted_rho"] == pytest.approx(0.504975, abs=1e-6)
    assert th["branch"] == "alpha>=beta"
    assert th["eta"] == pytest.approx(0.006)
    th = build_scenario("robot_racbf").theory()
    assert th["predicted_rho"] == 0.01 and th["min_rho"] < 1e-300


def test_wiener_theory():
    th = build_scenario("wiener").theory()
    assert th["stay_probability"] == pytest.approx(0.682689, abs=1e-6)


@pytest.fixture(scope="module")
def merge():
    return build_scenario("merge")


def test_merge_builds_and_checks(merge):
    assert merge.barrier_names[0] == "road"
    assert merge.barrier_names[1:] == [f"collision_{j}" for j in range(1, 11)]
    assert all(c.ok for c in merge.checks()), [c for c in merge.checks() if not c.ok]
    assert merge.nominal_conflict_gap() < merge.d_min
    assert merge.survival_budget()["total_survival"] >= 0.99


def test_merge_conflict_vehicle_shares_merge_lane(merge):
    assert merge.highway_lanes[merge.conflict - 1] == merge.merge_lane
    assert set(merge.highway_lanes) == {0.0, 3.0}


def test_merge_without_conflict_is_rejected():
    with pytest.raises(ConfigError, match="nominal-collision"):
        build_scenario("merge", ["model.conflict_x0=-60.0"])


def test_merge_budget_target():
    with pytest.raises(AdmissibilityError, match="composite survival"):
        build_scenario("merge_rho12", ["scenario.budget.target_survival=0.95"])


def test_merge_overlap():
    with pytest.raises(ConfigError):
        build_scenario("merge", ["model.spacing=2.0", "model.lanes=[0.0, 0.5]"])


def test_merge_levels_must_ascend():
    with pytest.raises(CascadeError):
        build_scenario("merge", ["cascade.levels=[0.2, 0.6, 0.4, 0.8, 1.0]"])
    with pytest.raises(CascadeError):
        build_scenario("merge", ["cascade.levels=[0.2, 0.4, 0.6, 0.8, 0.9]"])


def test_merge_lane_sampling_is_per_seed(merge):
    seeds = [derive_seed(1, i) for i in range(4)]
    X_all, g_all = merge.sample_lanes(seeds)
    X_one, g_one = merge.sample_lanes(seeds[2:3])
    assert np.array_equal(X_all[2], X_one[0]) and np.array_equal(g_all[2], g_one[0])
    ego_v = X_all[:, 3]
    assert np.all((ego_v >= 24) & (ego_v <= 26))
    assert np.all((g_all >= 0.25) & (g_all <= 0.75))


def test_merge_classifier_covers_all_lanes():
    cfg = load_config("merge")
    sc = MergeScenario(apply_overrides(cfg, ["mc.T=1.0"]), verify=False)
    seeds = [derive_seed(2, i) for i in range(3)]
    setup = sc.setup(seeds)
    out = simulate_lanes(setup.model, setup.controller, setup.monitored, setup.x0, sc.T, sc.dt, seeds)
    tags = sc.classify(out, setup)
    assert len(tags) == 3
    assert set(tags) <= {"unsafe", "merged_behind", "merged_ahead", "not_merged"}
    # one second in the ego is still on the ramp
    assert tags == ["not_merged"] * 3


def test_merge_eta_levels(merge):
    levels = merge.eta_levels()
    assert levels["road"] == (0.2, 0.4, 0.6, 0.8, 1.0)
    assert len(levels) == 11


def test_merge_theory(merge):
    th = merge.theory()
    assert th["sigma_a"] == pytest.approx(0.048135)
    assert th["sigma_omega"] == pytest.approx(0.048135 * math.pi / 32)
    assert th["predicted_rho"] <= 0.01
