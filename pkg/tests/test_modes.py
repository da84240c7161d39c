import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocil.estimator import EstimatorState, NoiseModel, ResidualSpec
from ocil.models import AffineParamDynamics, NeuralPolicy, make_environment
from ocil.modes import (ImitationMode, PolicyTuningMode, SysIdMode, cumulative_loss, generate_excitation_data,
                        generate_expert_demos, inject_noise, loss_and_gradient, make_episodes, ocil_step,
                        run_offline_phase, run_online_phase)
from ocil.ocp import Trajectory, WeightedGoalCost, rollout_closed_loop, rollout_open_loop

STATE = ResidualSpec(4, 1)


@pytest.fixture(scope="module")
def imitation_setup():
    env = make_environment("cartpole", dt=0.1)
    cost = WeightedGoalCost(env.goal, 1, "scalar")
    theta_star = np.r_[env.theta_star, 1.0]
    demos = generate_expert_demos(env.dynamics, cost, theta_star, 5, np.random.default_rng(0), (10, 20))
    return env, cost, theta_star, demos


@pytest.fixture(scope="module")
def sysid_mode():
    env = make_environment("cartpole")
    data = generate_excitation_data(env.dynamics, env.theta_star, 5, np.random.default_rng(0), (10, 20))
    return env, SysIdMode(env.dynamics, make_episodes(data, STATE, 0.0, np.random.default_rng(1), True),
                          env.theta_star)


def scalar_sysid(theta_star=1.0, T=10):
    dyn = AffineParamDynamics([[0.0]], [[0.0]], A_theta=[[[1.0]]])
    traj = rollout_open_loop(dyn, [1.0], np.zeros((T, 1)), [theta_star])
    eps = make_episodes([traj], ResidualSpec(1, 1), 0.0, np.random.default_rng(0), True)
    return SysIdMode(dyn, eps, np.array([theta_star]))


def test_demo_from_goal_needs_no_input(imitation_setup):
    env, cost, theta_star, _ = imitation_setup
    demo = generate_expert_demos(env.dynamics, cost, theta_star, 1, np.random.default_rng(0), (10, 10),
                                 x0_sampler=lambda rng: env.goal.copy())[0]
    np.testing.assert_allclose(demo.us, 0.0, atol=1e-12)


def test_identity_measurement_reproduces_demos(imitation_setup):
    *_, demos = imitation_setup
    eps = make_episodes(demos, STATE, 0.0, np.random.default_rng(0))
    for ep, d in zip(eps, demos):
        np.testing.assert_array_equal(ep.clean, d.xs)
        np.testing.assert_array_equal(ep.observed, d.xs)


def test_demo_set_reference(imitation_setup):
    *_, demos = imitation_setup
    assert [d.horizon for d in demos] == [19, 17, 16, 20, 10]
    np.testing.assert_allclose([d.us[0, 0] for d in demos],
                               [-1.2076400097430575, 5.912198615039341, 5.291266083051385, 4.3095443363382335,
                                -5.87813819376336], rtol=1e-6)
    np.testing.assert_allclose([d.xs.sum() for d in demos],
                               [-141.4125570582554, 38.484662053489444, 19.10041210426525, 138.14692159803113,
                                -38.061385313979294], rtol=1e-6)


def test_zero_excitation_keeps_equilibrium():
    env = make_environment("cartpole")
    data = generate_excitation_data(env.dynamics, env.theta_star, 2, np.random.default_rng(0), amplitude=0.0,
                                    x0_sampler=lambda rng: np.zeros(4))
    for tr in data:
        np.testing.assert_array_equal(tr.xs, 0.0)


def test_excitation_deterministic_and_reference():
    env = make_environment("cartpole")
    a = generate_excitation_data(env.dynamics, env.theta_star, 1, np.random.default_rng(0), (15, 15))[0]
    b = generate_excitation_data(env.dynamics, env.theta_star, 1, np.random.default_rng(0), (15, 15))[0]
    assert a.xs.tobytes() == b.xs.tobytes() and a.us.tobytes() == b.us.tobytes()
    assert np.all(np.abs(a.us) <= 1.0)
    np.testing.assert_allclose(a.xs[-1], [0.011724494282040875, -0.5046005259600662, -3.5778241193644464,
                                          -8.417616653975625], rtol=1e-10)


def test_inject_noise_statistics():
    rng = np.random.default_rng(0)
    clean = np.array([0.3, -1.0])
    np.testing.assert_array_equal(inject_noise(clean, 0.0, rng), clean)
    n = 100_000
    draws = inject_noise(np.broadcast_to(clean, (n, 2)), 0.1, rng)
    assert np.all(np.abs(draws.mean(axis=0) - clean) <= 3 * 0.1 / np.sqrt(n))
    draws = inject_noise(np.broadcast_to(clean, (n, 2)), 0.05, rng)
    assert np.all(np.abs(draws.var(axis=0) / 0.0025 - 1.0) <= 0.05)
    with pytest.raises(ValueError):
        inject_noise(clean, -0.1, rng)


def test_fixed_point_step_is_noop(sysid_mode):
    env, mode = sysid_mode
    state = EstimatorState.initial(env.theta_star, 10.0)
    post, rec = ocil_step(mode, state, 2, 6, NoiseModel())
    assert rec.residual_norm == 0.0
    np.testing.assert_array_equal(post.theta, env.theta_star)


def test_scalar_sysid_step_moves_toward_truth():
    mode = scalar_sysid()
    post, rec = ocil_step(mode, EstimatorState.initial([0.5], 10.0), 0, 3, NoiseModel())
    assert post.theta[0] > 0.5 and not rec.failed


def test_imitation_step_reference(imitation_setup):
    env, cost, theta_star, demos = imitation_setup
    mode = ImitationMode(env.dynamics, cost, make_episodes(demos, STATE, 0.0, np.random.default_rng(1)), theta_star)
    post, rec = ocil_step(mode, EstimatorState.initial([1.1, 0.12, 0.45, 1.2], 10.0), 0, 5, NoiseModel(), 0.0, {})
    np.testing.assert_allclose(post.theta, [1.0990369662205648, 0.11687177586325388, 0.4624359407566762,
                                            1.2005978016890786], rtol=1e-6)
    assert rec.residual_norm == pytest.approx(0.40112347959851286, rel=1e-6)
    assert rec.ocil_ms >= 0 and rec.gg_ms >= 0 and rec.est_ms >= 0


def test_inadmissible_update_is_skipped(imitation_setup):
    env, cost, theta_star, demos = imitation_setup
    mode = ImitationMode(env.dynamics, cost, make_episodes(demos, STATE, 0.0, np.random.default_rng(1)), theta_star)
    assert not mode.admissible([1.0, 0.1, 0.5, -0.1])
    state = EstimatorState.initial([1.0, 0.1, 0.5, 1e-9], 10.0)
    post, rec = ocil_step(mode, state, 1, 8, NoiseModel(R=1e-6 * np.eye(4)), 0.0, {})
    if rec.failed:
        np.testing.assert_array_equal(post.theta, state.theta)
        np.testing.assert_array_equal(post.P, state.P)
    else:
        assert mode.admissible(post.theta)


def test_solver_failure_skips_update(imitation_setup):
    env, cost, theta_star, demos = imitation_setup
    mode = ImitationMode(env.dynamics, cost, make_episodes(demos, STATE, 0.0, np.random.default_rng(1)), theta_star,
                         tol=1e-300)
    state = EstimatorState.initial([1.1, 0.12, 0.45, 1.2], 10.0)
    post, rec = ocil_step(mode, state, 0, 3)
    assert rec.failed and "stationarity" in rec.error
    np.testing.assert_array_equal(post.theta, state.theta)


def test_observation_dimension_checked(sysid_mode):
    _, mode = sysid_mode
    bad = SysIdMode(mode.dynamics, mode.episodes, mode.theta_star)
    bad.spec = ResidualSpec(4, 1, "full")
    with pytest.raises(ValueError):
        ocil_step(bad, EstimatorState.initial(mode.theta_star, 10.0), 0, 0)


def test_zero_offline_epochs_keep_state(sysid_mode):
    env, mode = sysid_mode
    state = EstimatorState.initial(env.theta_star * 1.1, 10.0)
    post, trace = run_offline_phase(mode, state, 0)
    assert trace == []
    np.testing.assert_array_equal(post.theta, state.theta)


def test_scalar_replays_reduce_loss():
    mode = scalar_sysid()
    state, trace = run_online_phase(mode, EstimatorState.initial([0.5], 10.0))
    assert len(trace) == mode.data_points == 11
    losses = [cumulative_loss(mode, state.theta)]
    for _ in range(5):
        state, _ = run_offline_phase(mode, state, 1)
        losses.append(cumulative_loss(mode, state.theta))
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert 0.99 < state.theta[0] < 1.0


def test_converged_offline_loss_flat(sysid_mode):
    env, mode = sysid_mode
    post, _ = run_offline_phase(mode, EstimatorState.initial(env.theta_star, 10.0), 2)
    assert cumulative_loss(mode, post.theta) == 0.0


def test_cumulative_loss_examples(sysid_mode):
    env, mode = sysid_mode
    assert cumulative_loss(mode, env.theta_star) == 0.0
    assert cumulative_loss(mode, env.theta_star * np.array([1.0, 1.1, 1.0])) == pytest.approx(0.04929013375370713,
                                                                                             rel=1e-9)
    dyn = AffineParamDynamics([[1.0]], [[1.0]])
    one = SysIdMode(dyn, make_episodes([rollout_open_loop(dyn, [0.0], [[0.0]], [0.0])], ResidualSpec(1, 1), 0.0,
                                       np.random.default_rng(0), True))
    one.episodes[0].clean[:] = [[1.0], [1.0]]
    assert cumulative_loss(one, [0.0]) == 2.0


def test_loss_gradient_matches_fd(sysid_mode):
    env, mode = sysid_mode
    th = env.theta_star * np.array([1.05, 0.9, 1.1])
    _, g = loss_and_gradient(mode, th)
    h = 1e-6
    fd = [(cumulative_loss(mode, th + h * e) - cumulative_loss(mode, th - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-5)


def test_sysid_paths_agree(sysid_mode):
    env, mode = sysid_mode
    pdp = SysIdMode(mode.dynamics, mode.with_episodes(mode.episodes).episodes, env.theta_star, via_pdp=True)
    state = EstimatorState.initial(env.theta_star * np.array([1.2, 0.8, 1.1]), 10.0)
    a, b = state, state
    for t in range(8):
        a, _ = ocil_step(mode, a, 1, t)
        b, _ = ocil_step(pdp, b, 1, t)
    np.testing.assert_allclose(b.theta, a.theta, atol=1e-10)
    np.testing.assert_allclose(b.P, a.P, atol=1e-10)


def test_cartpole_sysid_noise_free_online_convergence(sysid_mode):
    env, mode = sysid_mode
    th0 = env.theta_star * np.array([1.2, 0.7, 1.3])
    post, _ = run_online_phase(mode, EstimatorState.initial(th0, 10.0))
    assert cumulative_loss(mode, post.theta) <= 1e-6 * cumulative_loss(mode, th0)


def test_data_point_accounting(sysid_mode):
    env, mode = sysid_mode
    state = EstimatorState.initial(env.theta_star * 1.05, 10.0)
    state, on = run_online_phase(mode, state)
    _, off = run_offline_phase(mode, state, 3)
    assert len(on) == mode.data_points == sum(ep.horizon + 1 for ep in mode.episodes)
    assert len(off) == 3 * mode.data_points


def test_runs_are_bitwise_deterministic(sysid_mode):
    env, mode = sysid_mode
    runs = []
    for _ in range(2):
        state = EstimatorState.initial(env.theta_star * 1.1, 10.0)
        state, _ = run_online_phase(mode, state, NoiseModel(0.05))
        runs.append((state.theta.tobytes(), state.P.tobytes()))
    assert runs[0] == runs[1]


def _policy_mode(rng):
    env = make_environment("cartpole")
    pol = NeuralPolicy.for_system(4, 1)
    theta_star = rng.uniform(-0.3, 0.3, pol.p)
    x0 = np.array([0.1, 0.0, 0.2, 0.0])
    ref = rollout_closed_loop(env.dynamics, pol, x0, 12, theta_star, env.theta_star)
    eps = make_episodes([ref], STATE, 0.0, rng)
    return PolicyTuningMode(env.dynamics, env.theta_star, pol, eps, theta_star)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["sysid", "policy", "imitation"]))
def test_fixed_point_in_every_mode(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "sysid":
        env = make_environment("cartpole")
        data = generate_excitation_data(env.dynamics, env.theta_star, 1, rng, (10, 12))
        mode = SysIdMode(env.dynamics, make_episodes(data, STATE, 0.0, rng, True), env.theta_star)
    elif kind == "policy":
        mode = _policy_mode(rng)
    else:
        env = make_environment("cartpole", dt=0.1)
        cost = WeightedGoalCost(env.goal, 1, "scalar")
        ts = np.r_[env.theta_star, 1.0]
        demos = generate_expert_demos(env.dynamics, cost, ts, 1, rng, (8, 10))
        mode = ImitationMode(env.dynamics, cost, make_episodes(demos, STATE, 0.0, rng), ts)
    state = EstimatorState.initial(mode.theta_star, 10.0)
    post, trace = run_online_phase(mode, state)
    post, off = run_offline_phase(mode, post, 1)
    assert all(r.residual_norm <= 1e-7 for r in trace + off)
    np.testing.assert_allclose(post.theta, mode.theta_star, atol=1e-12)
