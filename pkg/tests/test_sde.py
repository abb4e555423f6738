import math

import numpy as np
import pytest

from riskgate.models import single_integrator_model
from riskgate.scenarios.barriers import robot_barrier
from riskgate.sde import (
    FeedbackController,
    IntegrationFault,
    LaneNoise,
    PreconditionError,
    SdeModel,
    derive_seed,
    euler_maruyama_step,
    n_steps,
    simulate_lanes,
    simulate_trial,
    splitmix64,
)


def zero_controller(m=2):
    return FeedbackController(lambda t, x: np.zeros((x.shape[0], m)), m)


def constant_controller(u):
    u = np.asarray(u, dtype=float)
    return FeedbackController(lambda t, x: np.broadcast_to(u, (x.shape[0], u.size)), u.size)


def test_em_step_examples():
    model = single_integrator_model(0.003, 0.003)
    x = euler_maruyama_step(model, [0.5, 0.0], [0.0, 0.0], 1e-3, [1.0, 0.0])
    assert x[0] - 0.5 == pytest.approx(9.4868e-5, abs=1e-9)
    assert x[1] == 0.0
    x = euler_maruyama_step(model, [0.0, 0.0], [1.0, -2.0], 0.01, [0.0, 0.0])
    assert np.allclose(x, [0.01, -0.02], atol=1e-15)


def test_em_step_batch_matches_single():
    model = single_integrator_model(0.1, 0.2)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 2))
    U = rng.normal(size=(5, 2))
    Xi = rng.normal(size=(5, 2))
    batch = euler_maruyama_step(model, X, U, 0.01, Xi)
    for i in range(5):
        assert np.array_equal(batch[i], euler_maruyama_step(model, X[i], U[i], 0.01, Xi[i]))


def test_em_step_rejects_bad_step():
    model = single_integrator_model(0.1, 0.1)
    with pytest.raises(ValueError):
        euler_maruyama_step(model, [0, 0], [0, 0], 0.0, [0, 0])


def test_model_shape_check():
    bad = SdeModel(2, 1, 1, lambda x: np.zeros((x.shape[0], 3)), lambda x: np.zeros((x.shape[0], 2, 1)),
                   lambda x: np.zeros((x.shape[0], 2, 1)), name="bad")
    with pytest.raises(ValueError, match="inconsistent shapes"):
        bad.evaluate(np.zeros(2))


def test_n_steps():
    assert n_steps(1.0, 1e-3) == 1000
    assert n_steps(4.0, 0.01) == 400
    with pytest.raises(PreconditionError):
        n_steps(1.0, 0.3)
    with pytest.raises(PreconditionError):
        n_steps(1.0, 2.0)


def test_seed_derivation_is_stable_and_distinct():
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    seeds = {derive_seed(20240601, i) for i in range(10_000)}
    assert len(seeds) == 10_000
    assert derive_seed(1, 5) == derive_seed(1, 5)
    assert derive_seed(1, 5) != derive_seed(2, 5)


def test_lane_noise_statistics():
    noise = LaneNoise([derive_seed(7, i) for i in range(200)], q=3, block=50)
    draws = np.stack([noise.draw(k).copy() for k in range(500)])
    assert abs(draws.mean()) < 4 / math.sqrt(draws.size)
    assert draws.var() == pytest.approx(1.0, abs=0.02)
    # channels and lanes uncorrelated
    flat = draws.reshape(-1, 3)
    corr = np.corrcoef(flat.T)
    assert np.max(np.abs(corr - np.eye(3))) < 0.02


def test_lane_noise_independent_of_companions():
    seeds = [derive_seed(3, i) for i in range(4)]
    together = LaneNoise(seeds, 2, block=8)
    alone = LaneNoise(seeds[2:3], 2, block=8)
    for k in range(20):
        assert np.array_equal(together.draw(k)[2], alone.draw(k)[0])


def test_lane_noise_must_be_sequential():
    noise = LaneNoise([1], 1, block=4)
    noise.draw(0)
    with pytest.raises(ValueError):
        noise.draw(9)


def test_simulation_is_deterministic():
    model = single_integrator_model(0.3, 0.3)
    barrier = robot_barrier()
    seeds = [derive_seed(11, i) for i in range(20)]
    x0 = np.tile([0.7, 0.0], (20, 1))
    a = simulate_lanes(model, zero_controller(), [barrier], x0, 1.0, 0.01, seeds)
    b = simulate_lanes(model, zero_controller(), [barrier], x0, 1.0, 0.01, seeds)
    assert np.array_equal(a.final_state, b.final_state)
    assert np.array_equal(a.stopped, b.stopped)
    assert np.array_equal(a.max_barrier, b.max_barrier)


def test_chunk_composition_does_not_change_lanes():
    model = single_integrator_model(0.3, 0.3)
    barrier = robot_barrier()
    seeds = [derive_seed(12, i) for i in range(12)]
    x0 = np.tile([0.7, 0.0], (12, 1))
    whole = simulate_lanes(model, zero_controller(), [barrier], x0, 1.0, 0.01, seeds)
    parts = [simulate_lanes(model, zero_controller(), [barrier], x0[i:i + 5], 1.0, 0.01, seeds[i:i + 5])
             for i in range(0, 12, 5)]
    assert np.array_equal(whole.final_state, np.vstack([p.final_state for p in parts]))
    assert np.array_equal(whole.tau, np.concatenate([p.tau for p in parts]), equal_nan=True)
    assert whole.stopped.any() and not whole.stopped.all()


def test_deterministic_crossing_time_within_one_step():
    # B = x^2 on the unit disk, x(t) = 0.5 + t crosses at t = 0.5
    model = single_integrator_model(0.0, 0.0)
    dt = 0.01
    out = simulate_lanes(model, constant_controller([1.0, 0.0]), [robot_barrier()], [[0.5, 0.0]], 1.0, dt, [1])
    assert out.stopped[0]
    assert 0.5 - dt <= out.tau[0] <= 0.5 + dt
    assert out.exit_barrier[0] == 0
    assert out.max_barrier[0, 0] >= 1.0


def test_stopped_lane_is_frozen():
    model = single_integrator_model(0.0, 0.0)
    out, (states, controls, bvals) = simulate_lanes(
        model, constant_controller([1.0, 0.0]), [robot_barrier()], [[0.5, 0.0]], 1.0, 0.01, [1], record=True
    )
    k = int(round(out.tau[0] / 0.01))
    assert np.all(states[k:] == states[k])
    assert np.all(np.isnan(controls[k:]))
    assert np.all(bvals[k:] == bvals[k])


def test_precondition_outside_safe_set():
    model = single_integrator_model(0.1, 0.1)
    with pytest.raises(PreconditionError):
        simulate_lanes(model, zero_controller(), [robot_barrier()], [[1.0, 0.0]], 1.0, 0.01, [1])


def test_unknown_exit_test():
    model = single_integrator_model(0.1, 0.1)
    with pytest.raises(ValueError):
        simulate_lanes(model, zero_controller(), [robot_barrier()], [[0.0, 0.0]], 1.0, 0.01, [1], exit_test="x")


def test_integration_fault_reports_lane_and_step():
    def drift(x):
        return np.where(x[:, :1] > 0.05, np.inf, 1.0) * np.ones_like(x)

    model = SdeModel(2, 2, 2, drift, lambda x: np.zeros((x.shape[0], 2, 2)),
                     lambda x: np.zeros((x.shape[0], 2, 2)), name="blowup")
    with pytest.raises(IntegrationFault) as info:
        simulate_lanes(model, zero_controller(), [], [[0.0, 0.0], [0.2, 0.0]], 1.0, 0.1, [1, 2])
    assert info.value.lane == 1
    assert info.value.step == 0


def test_bridge_exit_raises_exit_rate_toward_continuous_law():
    # drift-free Brownian motion from 0, barrier B = x^2 on |x| < 1 in one coordinate
    sigma = 1.0
    model = single_integrator_model(sigma, 0.0)
    N = 4000
    seeds = [derive_seed(5, i) for i in range(N)]
    x0 = np.zeros((N, 2))
    grid = simulate_lanes(model, zero_controller(), [robot_barrier()], x0, 1.0, 0.01, seeds)
    bridge = simulate_lanes(model, zero_controller(), [robot_barrier()], x0, 1.0, 0.01, seeds, exit_test="bridge")
    # P(sup |W_t| < 1 on [0,1]) = 0.3708
    exact = 0.370777
    se = math.sqrt(exact * (1 - exact) / N)
    assert (1 - bridge.stopped.mean()) == pytest.approx(exact, abs=4 * se)
    assert grid.stopped.sum() <= bridge.stopped.sum()


def test_simulate_trial_record():
    model = single_integrator_model(0.003, 0.003)
    rec = simulate_trial(model, zero_controller(), [robot_barrier()], [0.7, 0.0], 0.1, 0.01, 42)
    assert rec.states.shape == (11, 2)
    assert rec.barrier_names == ["disk"]
    assert not rec.stopped and rec.tau is None
    assert rec.dt == pytest.approx(0.01)
    assert np.all(np.isnan(rec.controls[-1]))
