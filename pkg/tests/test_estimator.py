import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ocil.diffcore import fd_jacobian, relative_error
from ocil.estimator import (EstimatorState, NoiseModel, ResidualSpec, assemble_residual_jacobian, ekf_predict,
                            ekf_update, lyapunov_value, rt_sizing)
from ocil.models import make_environment
from ocil.ocp import Trajectory, rollout_open_loop
from ocil.pdp import ConditioningError, TrajectoryGradient, open_loop_gradient
from ocil.verification import batch_least_squares


def random_spd(rng, k, floor=0.1):
    a = rng.normal(size=(k, k))
    return a @ a.T + floor * np.eye(k)


def test_predict_is_identity():
    s = EstimatorState(np.array([1.0, 2.0]), np.diag([3.0, 4.0]))
    for _ in range(5):
        s = ekf_predict(s)
    np.testing.assert_array_equal(s.theta, [1.0, 2.0])
    np.testing.assert_array_equal(s.P, np.diag([3.0, 4.0]))


def test_predict_inflation():
    s = ekf_predict(EstimatorState(np.zeros(2), np.eye(2)), q=0.25)
    np.testing.assert_array_equal(s.P, 1.25 * np.eye(2))


def test_scalar_update():
    prior = EstimatorState(np.zeros(1), np.eye(1))
    # residual l = y - h(theta) with dl/dtheta = L; the estimate moves along -K l
    post = ekf_update(prior, [[-1.0]], [1.0], np.eye(1))
    np.testing.assert_allclose(post.theta, [0.5])
    np.testing.assert_allclose(post.P, [[0.5]])
    post = ekf_update(prior, [[1.0]], [1.0], np.eye(1))
    np.testing.assert_allclose(post.theta, [-0.5])
    np.testing.assert_allclose(post.P, [[0.5]])


def test_infinite_noise_limit():
    prior = EstimatorState(np.array([0.3, -0.2]), np.eye(2))
    post = ekf_update(prior, np.ones((1, 2)), [1.0], 1e12 * np.eye(1))
    np.testing.assert_allclose(post.theta, prior.theta, atol=1e-10)
    np.testing.assert_allclose(post.P, prior.P, atol=1e-10)


def test_nonfinite_jacobian_is_conditioning_error():
    with pytest.raises(ConditioningError):
        ekf_update(EstimatorState(np.zeros(1), np.eye(1)), [[np.nan]], [1.0], np.eye(1))


def test_fifty_step_stream_matches_batch_least_squares():
    rng = np.random.default_rng(0)
    p, r = 3, 2
    theta_star = rng.normal(size=p)
    state = EstimatorState.initial(np.zeros(p), 10.0)
    As, ys, Rs = [], [], []
    for _ in range(50):
        A = rng.normal(size=(r, p))
        y = A @ theta_star + 0.1 * rng.normal(size=r)
        R = random_spd(rng, r, 0.5)
        state = ekf_update(state, -A, y - A @ state.theta, R)
        As.append(A); ys.append(y); Rs.append(R)
    np.testing.assert_allclose(state.theta, batch_least_squares(np.zeros(p), 10 * np.eye(p), As, ys, Rs), atol=1e-8)


def test_lyapunov_examples():
    assert lyapunov_value([1.0, 2.0], EstimatorState(np.array([1.0, 2.0]), np.eye(2))) == 0.0
    assert lyapunov_value([1.0, 0.0], EstimatorState(np.zeros(2), np.eye(2))) == 1.0
    assert lyapunov_value([1.0, 1.0], EstimatorState(np.zeros(2), np.diag([2.0, 0.5]))) == pytest.approx(2.5)


def test_rt_sizing_examples():
    np.testing.assert_allclose(rt_sizing([[2.0]], np.eye(1), 10.0, 0.0), [[40.0]])
    np.testing.assert_allclose(rt_sizing(np.zeros((2, 3)), np.eye(3), 10.0, 0.1), 0.01 * np.eye(2))
    np.testing.assert_allclose(rt_sizing([[0.01]], np.eye(1), 1.0, 5.0), [[25.0]])
    with pytest.raises(ValueError):
        rt_sizing([[1.0]], np.eye(1), 0.5)


def test_noise_model_rejects_bad_inputs():
    with pytest.raises(ValueError):
        NoiseModel(sigma=-1.0)
    with pytest.raises(ValueError):
        NoiseModel(R=-np.eye(2))


def test_state_residual_jacobian_is_minus_x():
    rng = np.random.default_rng(1)
    g = TrajectoryGradient(rng.normal(size=(4, 3, 2)), rng.normal(size=(3, 1, 2)))
    spec = ResidualSpec(3, 1)
    np.testing.assert_array_equal(assemble_residual_jacobian(spec, g, 2), -g.X[2])
    full = ResidualSpec(3, 1, "full")
    np.testing.assert_array_equal(assemble_residual_jacobian(full, g, 1), -np.vstack([g.X[1], g.U[1]]))
    np.testing.assert_array_equal(assemble_residual_jacobian(full, g, 3)[3:], 0.0)


def test_zero_gradient_gives_zero_jacobian():
    g = TrajectoryGradient(np.zeros((5, 4, 3)), np.zeros((4, 1, 3)))
    np.testing.assert_array_equal(assemble_residual_jacobian(ResidualSpec(4, 1), g, 2), np.zeros((4, 3)))


def test_residual_jacobian_shape_errors():
    g = TrajectoryGradient(np.zeros((5, 4, 3)), np.zeros((4, 1, 3)))
    with pytest.raises(ValueError):
        assemble_residual_jacobian(ResidualSpec(3, 1), g, 2)
    with pytest.raises(ValueError):
        assemble_residual_jacobian(ResidualSpec(4, 1), g, 7)


def test_sysid_residual_jacobian_matches_fd():
    env = make_environment("cartpole")
    us = np.random.default_rng(2).uniform(-1, 1, (10, 1))
    x0 = np.array([0.1, 0.0, 0.2, 0.0])
    obs = rollout_open_loop(env.dynamics, x0, us, env.theta_star).xs[5]
    theta = env.theta_star * np.array([1.1, 0.9, 1.05])
    spec = ResidualSpec(4, 1)
    traj = rollout_open_loop(env.dynamics, x0, us, theta)
    L = assemble_residual_jacobian(spec, open_loop_gradient(env.dynamics, traj, theta), 5)
    fd = fd_jacobian(lambda th: spec.residual(rollout_open_loop(env.dynamics, x0, us, th), 5, obs), theta)
    assert relative_error(L, fd) < 1e-4


def test_residual_partial_matches_fd():
    rng = np.random.default_rng(3)
    for kind in ("state", "full"):
        spec = ResidualSpec(3, 2, kind)
        xs, us = rng.normal(size=(5, 3)), rng.normal(size=(4, 2))
        obs = rng.normal(size=spec.dim)
        for t in (0, 4):
            def l_of(z):
                xs2, us2 = xs.copy(), us.copy()
                xs2[t] = z[:3]
                if t < 4:
                    us2[t] = z[3:]
                return spec.residual(Trajectory(xs2, us2), t, obs)
            z0 = np.r_[xs[t], us[t] if t < 4 else np.zeros(2)]
            np.testing.assert_allclose(fd_jacobian(l_of, z0), spec.partial(t, 4), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4))
def test_sequential_matches_batch_every_step(seed, p, r):
    rng = np.random.default_rng(seed)
    th0 = rng.normal(size=p)
    theta_star = rng.normal(size=p)
    state = EstimatorState.initial(th0, 10.0)
    As, ys, Rs = [], [], []
    for _ in range(100):
        A = rng.normal(size=(r, p))
        y = A @ theta_star + 0.05 * rng.normal(size=r)
        R = random_spd(rng, r, 0.5)
        state = ekf_update(state, -A, y - A @ state.theta, R)
        As.append(A); ys.append(y); Rs.append(R)
        ref = batch_least_squares(th0, 10 * np.eye(p), As, ys, Rs)
        assert np.max(np.abs(state.theta - ref)) <= 1e-8 * max(1.0, np.max(np.abs(ref)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 3))
def test_covariance_symmetric_pd_and_monotone(seed, p, r):
    rng = np.random.default_rng(seed)
    prior = EstimatorState(rng.normal(size=p), random_spd(rng, p))
    post = ekf_update(prior, rng.normal(size=(r, p)), rng.normal(size=r), NoiseModel())
    np.testing.assert_allclose(post.P, post.P.T, atol=1e-12)
    assert np.linalg.eigvalsh(post.P)[0] > 0
    assert np.linalg.eigvalsh(prior.P - post.P)[0] >= -1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_joint_scaling_invariance(seed, alpha):
    rng = np.random.default_rng(seed)
    p, r = 3, 2
    prior = EstimatorState(rng.normal(size=p), random_spd(rng, p))
    L, l, R = rng.normal(size=(r, p)), rng.normal(size=r), random_spd(rng, r)
    a = ekf_update(prior, L, l, R)
    b = ekf_update(prior, alpha * L, alpha * l, alpha**2 * R)
    np.testing.assert_allclose(b.theta, a.theta, atol=1e-12, rtol=1e-12)
    np.testing.assert_allclose(b.P, a.P, atol=1e-12, rtol=1e-11)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_noise_free_linear_convergence_within_p_observations(seed, p):
    rng = np.random.default_rng(seed)
    theta_star = rng.normal(size=p)
    state = EstimatorState.initial(np.zeros(p), 10.0)
    for _ in range(p):
        a = rng.normal(size=(1, p))
        state = ekf_update(state, -a, a @ theta_star - a @ state.theta, 1e-14 * np.eye(1))
    assert np.linalg.norm(state.theta - theta_star) < 1e-8
