"""The three learning modes, data generation and the online/offline learning loop."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .estimator import (EstimatorState, NoiseModel, ResidualSpec, assemble_residual_jacobian, ekf_predict,
                        ekf_update)
from .models import DiscreteDynamics, NeuralPolicy, quat_from_axis_angle
from .ocp import (Cost, DivergenceError, OCProblem, SolverFailure, Trajectory, ZeroCost, rollout_closed_loop,
                  rollout_open_loop, solve_ocp)
from .pdp import TrajectoryGradient, closed_loop_gradient, open_loop_gradient, trajectory_gradient

MAX_REDRAWS = 10


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    """One recorded trajectory: clean and noisy observations for ``t = 0..T``."""

    x0: np.ndarray
    clean: np.ndarray
    observed: np.ndarray
    inputs: np.ndarray | None = None
    reference: Trajectory | None = None

    @property
    def horizon(self) -> int:
        return self.clean.shape[0] - 1


def inject_noise(clean, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``clean + sigma * z`` with ``z`` standard normal per component."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    clean = np.asarray(clean, dtype=float)
    if sigma == 0:
        return clean.copy()
    return clean + sigma * rng.standard_normal(clean.shape)


def sample_initial_state(n: int, rng: np.random.Generator, spread: float = 0.5, goal=None) -> np.ndarray:
    """Uniform box around ``goal``; 13-dim rigid-body states get a random unit quaternion tilt."""
    goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=float)
    x = goal + rng.uniform(-spread, spread, n)
    if n == 13:
        axis = rng.standard_normal(3)
        x[6:10] = quat_from_axis_angle(axis / np.linalg.norm(axis), rng.uniform(-spread, spread))
    return x


def _horizon(rng, horizon_range) -> int:
    lo, hi = horizon_range
    return int(rng.integers(lo, hi + 1))


def generate_excitation_data(dyn: DiscreteDynamics, theta_star, count: int, rng: np.random.Generator,
                             horizon_range=(10, 20), amplitude: float = 1.0, offset=None,
                             x0_sampler: Callable | None = None) -> list[Trajectory]:
    """Open-loop rollouts under inputs ``offset + U[-amplitude, amplitude]`` (re-drawn on divergence)."""
    offset = np.zeros(dyn.m) if offset is None else np.asarray(offset, dtype=float)
    sampler = x0_sampler or (lambda g: sample_initial_state(dyn.n, g))
    out = []
    for _ in range(count):
        T = _horizon(rng, horizon_range)
        x0 = sampler(rng)
        for attempt in range(MAX_REDRAWS):
            us = offset + rng.uniform(-amplitude, amplitude, (T, dyn.m))
            try:
                traj = rollout_open_loop(dyn, x0, us, theta_star)
            except DivergenceError:
                continue
            if np.all(np.abs(traj.xs) < 1e6):
                out.append(traj)
                break
        else:
            raise DivergenceError(f"excitation rollout diverged {MAX_REDRAWS} times")
    return out


def generate_expert_demos(dyn: DiscreteDynamics, cost: Cost, theta_star, count: int, rng: np.random.Generator,
                          horizon_range=(10, 20), x0_sampler: Callable | None = None,
                          tol: float = 1e-8) -> list[Trajectory]:
    """Optimal trajectories of the ground-truth problem from varied ``x0`` and ``T``."""
    sampler = x0_sampler or (lambda g: sample_initial_state(dyn.n, g))
    demos = []
    for _ in range(count):
        T = _horizon(rng, horizon_range)
        problem = OCProblem(dyn, cost, T, sampler(rng), np.asarray(theta_star, dtype=float))
        demos.append(solve_ocp(problem, tol=tol))
    return demos


def make_episodes(trajs: list[Trajectory], spec: ResidualSpec, sigma: float, rng: np.random.Generator,
                  keep_inputs: bool = False) -> list[Episode]:
    eps = []
    for tr in trajs:
        clean = spec.measure_all(tr)
        eps.append(Episode(tr.xs[0].copy(), clean, inject_noise(clean, sigma, rng),
                           tr.us.copy() if keep_inputs else None, tr))
    return eps


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


class Mode:
    """Maps a parameter guess to model trajectories and their sensitivities."""

    kind = "mode"
    spec: ResidualSpec
    episodes: list[Episode]
    theta_star: np.ndarray | None = None
    p: int
    # entries of theta that must stay strictly positive; updates leaving that region are skipped
    positive: np.ndarray | None = None

    def admissible(self, theta) -> bool:
        return self.positive is None or bool(np.all(np.asarray(theta)[self.positive] > 0))

    def simulate(self, theta, k: int, upto: int | None = None, cache: dict | None = None) -> Trajectory:
        raise NotImplementedError

    def sensitivity(self, theta, k: int, traj: Trajectory, cache: dict | None = None) -> TrajectoryGradient:
        raise NotImplementedError

    def with_episodes(self, episodes: list[Episode]) -> "Mode":
        raise NotImplementedError

    @property
    def data_points(self) -> int:
        return sum(ep.horizon + 1 for ep in self.episodes)


class SysIdMode(Mode):
    """Dynamics parameters from excitation data; the model replays the recorded inputs."""

    kind = "sysid"

    def __init__(self, dynamics: DiscreteDynamics, episodes, theta_star=None, via_pdp: bool = False):
        self.dynamics = dynamics
        self.episodes = list(episodes)
        self.theta_star = None if theta_star is None else np.asarray(theta_star, dtype=float)
        self.spec = ResidualSpec(dynamics.n, dynamics.m, "state")
        self.p = dynamics.p
        self.via_pdp = via_pdp
        for ep in self.episodes:
            if ep.inputs is None:
                raise ValueError("SysID episodes need recorded inputs")

    def simulate(self, theta, k, upto=None, cache=None):
        ep = self.episodes[k]
        us = ep.inputs if upto is None else ep.inputs[:max(upto, 1)]
        return rollout_open_loop(self.dynamics, ep.x0, us, theta)

    def sensitivity(self, theta, k, traj, cache=None):
        if self.via_pdp:
            problem = OCProblem(self.dynamics, ZeroCost(self.dynamics.n, self.dynamics.m), traj.horizon,
                                traj.xs[0], theta)
            return trajectory_gradient(problem, traj)
        return open_loop_gradient(self.dynamics, traj, theta)

    def with_episodes(self, episodes):
        return SysIdMode(self.dynamics, episodes, self.theta_star, self.via_pdp)


class ImitationMode(Mode):
    """Dynamics and objective parameters from demonstrations; each guess is re-solved."""

    kind = "imitation"

    def __init__(self, dynamics: DiscreteDynamics, cost: Cost, episodes, theta_star=None, tol: float = 1e-8,
                 residual: str = "state", positive=True):
        self.dynamics, self.cost = dynamics, cost
        self.episodes = list(episodes)
        self.theta_star = None if theta_star is None else np.asarray(theta_star, dtype=float)
        self.spec = ResidualSpec(dynamics.n, dynamics.m, residual)
        self.p = dynamics.p + cost.p
        self.tol = tol
        self.positive = None if positive is None else np.broadcast_to(np.asarray(positive, dtype=bool), (self.p,)).copy()

    def problem(self, theta, k) -> OCProblem:
        ep = self.episodes[k]
        return OCProblem(self.dynamics, self.cost, ep.horizon, ep.x0, np.asarray(theta, dtype=float))

    def simulate(self, theta, k, upto=None, cache=None):
        warm = cache.get(k) if cache is not None else None
        traj = solve_ocp(self.problem(theta, k), warm_start=warm, tol=self.tol)
        if cache is not None:
            cache[k] = traj
        return traj

    def sensitivity(self, theta, k, traj, cache=None):
        return trajectory_gradient(self.problem(theta, k), traj)

    def with_episodes(self, episodes):
        return ImitationMode(self.dynamics, self.cost, episodes, self.theta_star, self.tol, self.spec.kind,
                             self.positive)


class PolicyTuningMode(Mode):
    """Policy parameters so that closed-loop rollouts track reference trajectories."""

    kind = "policy"

    def __init__(self, dynamics: DiscreteDynamics, dyn_theta, policy: NeuralPolicy, episodes, theta_star=None):
        self.dynamics, self.policy = dynamics, policy
        self.dyn_theta = np.asarray(dyn_theta, dtype=float)
        self.episodes = list(episodes)
        self.theta_star = None if theta_star is None else np.asarray(theta_star, dtype=float)
        self.spec = ResidualSpec(dynamics.n, dynamics.m, "state")
        self.p = policy.p

    def simulate(self, theta, k, upto=None, cache=None):
        ep = self.episodes[k]
        T = ep.horizon if upto is None else max(min(upto, ep.horizon), 1)
        return rollout_closed_loop(self.dynamics, self.policy, ep.x0, T, theta, self.dyn_theta)

    def sensitivity(self, theta, k, traj, cache=None):
        return closed_loop_gradient(self.dynamics, self.policy, traj, theta, self.dyn_theta)

    def with_episodes(self, episodes):
        return PolicyTuningMode(self.dynamics, self.dyn_theta, self.policy, episodes, self.theta_star)


# ---------------------------------------------------------------------------
# Learning loop
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    episode: int
    t: int
    theta: np.ndarray
    residual_norm: float | None
    ocil_ms: float = 0.0
    gg_ms: float = 0.0
    est_ms: float = 0.0
    failed: bool = False
    error: str | None = None


def _upto(mode: Mode, k: int, t: int) -> int | None:
    # Rollout-based modes only need the prefix that reaches x_t (one extra input keeps u_t defined).
    if isinstance(mode, ImitationMode):
        return None
    return min(t + 1, mode.episodes[k].horizon)


def ocil_step(mode: Mode, state: EstimatorState, k: int, t: int, noise: NoiseModel | None = None,
              q: float = 0.0, cache: dict | None = None) -> tuple[EstimatorState, StepRecord]:
    """Predict, re-simulate under the prior, chain-rule ``L_t`` and correct with observation ``O_t``."""
    noise = noise or NoiseModel()
    obs = mode.episodes[k].observed[t]
    if obs.shape != (mode.spec.dim,):
        raise ValueError(f"observation has shape {obs.shape}, expected ({mode.spec.dim},)")
    prior = ekf_predict(state, q)
    t0 = time.perf_counter()
    # overflow in a diverging model surfaces as a non-finite update, which is rejected below
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            traj = mode.simulate(prior.theta, k, _upto(mode, k, t), cache)
        except (SolverFailure, DivergenceError) as exc:
            return state, StepRecord(k, t, state.theta.copy(), None, failed=True, error=str(exc))
        t1 = time.perf_counter()
        grad = mode.sensitivity(prior.theta, k, traj, cache)
        t2 = time.perf_counter()
        l = mode.spec.residual(traj, t, obs)
        L = assemble_residual_jacobian(mode.spec, grad, t)
        post = ekf_update(prior, L, l, noise)
    t3 = time.perf_counter()
    error = None
    if not (np.all(np.isfinite(post.theta)) and np.all(np.isfinite(post.P))):
        error = "non-finite update"
    elif not mode.admissible(post.theta):
        error = "update leaves the admissible parameter region"
    if error is not None:
        norm = float(np.linalg.norm(l)) if np.all(np.isfinite(l)) else None
        return state, StepRecord(k, t, state.theta.copy(), norm, 1e3 * (t1 - t0), 1e3 * (t2 - t1),
                                 1e3 * (t3 - t2), failed=True, error=error)
    rec = StepRecord(k, t, post.theta.copy(), float(np.linalg.norm(l)),
                     1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2))
    return post, rec


def _sweep(mode, state, noise, q, cache, callback):
    trace = []
    for k, ep in enumerate(mode.episodes):
        for t in range(ep.horizon + 1):
            state, rec = ocil_step(mode, state, k, t, noise, q, cache)
            trace.append(rec)
            if callback is not None:
                callback(state, rec)
    return state, trace


def run_online_phase(mode: Mode, state: EstimatorState, noise: NoiseModel | None = None, q: float = 0.0,
                     cache: dict | None = None, callback: Callable | None = None):
    """One pass over the data stream in arrival order."""
    return _sweep(mode, state, noise, q, {} if cache is None else cache, callback)


def run_offline_phase(mode: Mode, state: EstimatorState, epochs: int, noise: NoiseModel | None = None,
                      q: float = 0.0, cache: dict | None = None, callback: Callable | None = None):
    """``epochs`` exact replays of the stored data, continuing from ``state``."""
    cache = {} if cache is None else cache
    trace = []
    for _ in range(epochs):
        state, tr = _sweep(mode, state, noise, q, cache, callback)
        trace += tr
    return state, trace


def cumulative_loss(mode: Mode, theta, which: str = "clean", cache: dict | None = None) -> float | None:
    """``sum_t |l(xi_t(theta), O_t)|^2`` over all episodes; ``None`` if a trajectory cannot be produced."""
    total = 0.0
    for k, ep in enumerate(mode.episodes):
        data = ep.clean if which == "clean" else ep.observed
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                traj = mode.simulate(theta, k, None, cache)
        except (SolverFailure, DivergenceError):
            return None
        for t in range(ep.horizon + 1):
            l = mode.spec.residual(traj, t, data[t])
            total += float(l @ l)
    return total


def loss_and_gradient(mode: Mode, theta, which: str = "clean", cache: dict | None = None):
    """Cumulative loss and its gradient ``sum_t 2 L_t' l_t``; ``(None, None)`` on failure."""
    theta = np.asarray(theta, dtype=float)
    total, grad = 0.0, np.zeros(theta.size)
    for k, ep in enumerate(mode.episodes):
        data = ep.clean if which == "clean" else ep.observed
        try:
            traj = mode.simulate(theta, k, None, cache)
        except (SolverFailure, DivergenceError):
            return None, None
        sens = mode.sensitivity(theta, k, traj)
        for t in range(ep.horizon + 1):
            l = mode.spec.residual(traj, t, data[t])
            total += float(l @ l)
            grad += 2.0 * assemble_residual_jacobian(mode.spec, sens, t).T @ l
    return total, grad
