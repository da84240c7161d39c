"""Trial orchestration: build a mode from a config, run the learning loop and log every data point."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import MlpParams
from ..estimator import EstimatorState, NoiseModel, ResidualSpec, lyapunov_value
from ..models import NeuralDynamics, NeuralPolicy, make_environment
from ..modes import (ImitationMode, Mode, PolicyTuningMode, SysIdMode, cumulative_loss, generate_excitation_data,
                     generate_expert_demos, loss_and_gradient, make_episodes, run_offline_phase, run_online_phase,
                     sample_initial_state)
from ..ocp import WeightedGoalCost, rollout_closed_loop
from ..pdp import ConditioningError
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

CSV_FIELDS = ("trial", "phase", "data_point", "loss", "residual_norm", "theta_err", "lyapunov",
              "ocil_ms", "gg_ms", "est_ms")


@dataclass
class LogRow:
    trial: int
    phase: str
    data_point: int
    loss: float | None = None
    residual_norm: float | None = None
    theta_err: float | None = None
    lyapunov: float | None = None
    ocil_ms: float | None = None
    gg_ms: float | None = None
    est_ms: float | None = None


@dataclass
class TrialLog:
    trial: int
    rows: list[LogRow] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    theta: np.ndarray | None = None

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def losses(self, phase: str | None = None) -> list[tuple[int, float]]:
        return [(r.data_point, r.loss) for r in self.rows
                if r.loss is not None and (phase is None or r.phase == phase)]

    @property
    def initial_loss(self) -> float | None:
        pts = self.losses()
        return pts[0][1] if pts else None

    @property
    def final_loss(self) -> float | None:
        pts = self.losses()
        return pts[-1][1] if pts else None


# ---------------------------------------------------------------------------
# Experiment construction
# ---------------------------------------------------------------------------


def data_seed(cfg: ExperimentConfig) -> np.random.SeedSequence:
    return np.random.SeedSequence(cfg.seed, spawn_key=(0,))


def trial_seed(cfg: ExperimentConfig, trial: int, stream: int) -> np.random.SeedSequence:
    """Stream 0 draws theta_0, stream 1 draws measurement noise."""
    return np.random.SeedSequence(cfg.seed, spawn_key=(1, trial, stream))


@dataclass
class Experiment:
    cfg: ExperimentConfig
    mode: Mode                 # episodes hold clean observations only
    theta_star: np.ndarray | None
    prior_center: np.ndarray | None
    trajectories: list

    def episodes(self, sigma: float, rng: np.random.Generator):
        return make_episodes(self.trajectories, self.mode.spec, sigma, rng, keep_inputs=self.mode.kind == "sysid")

    def with_noise(self, sigma: float, rng: np.random.Generator) -> Mode:
        return self.mode.with_episodes(self.episodes(sigma, rng))

    def initial_theta(self, cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
        e = cfg.estimator
        if e.theta0 is not None:
            theta0 = np.asarray(e.theta0, dtype=float)
            if theta0.size != self.mode.p:
                raise ConfigError(f"estimator.theta0 must have {self.mode.p} entries")
            return theta0
        if self.prior_center is not None:
            lo, hi = e.prior
            return self.prior_center * rng.uniform(lo, hi, self.prior_center.size)
        return rng.uniform(-e.init_scale, e.init_scale, self.mode.p)


def _objective_theta(cfg: ExperimentConfig, n: int) -> np.ndarray:
    o = cfg.objective
    if o.weights == "scalar":
        return np.array(o.value[:1], dtype=float)
    if o.weights == "diag":
        if len(o.value) not in (1, n):
            raise ConfigError(f"objective.value must have 1 or {n} entries")
        return np.broadcast_to(np.asarray(o.value, dtype=float), (n,)).copy()
    return np.zeros(0)


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    env = make_environment(cfg.environment, dt=cfg.dt)
    dyn = env.dynamics
    n, m = dyn.n, dyn.m
    theta_dyn = env.theta_star if cfg.theta_star is None else np.asarray(cfg.theta_star, dtype=float)
    if theta_dyn.size != dyn.p:
        raise ConfigError(f"theta_star must have {dyn.p} entries for {cfg.environment}")
    rng = np.random.default_rng(data_seed(cfg))
    spread = cfg.data.x0_spread

    def sampler(g):
        return sample_initial_state(n, g, spread, env.goal)

    horizon = tuple(cfg.data.horizon)
    theta_obj = _objective_theta(cfg, n)
    cost = WeightedGoalCost(env.goal, m, cfg.objective.weights,
                            fixed_weights=cfg.objective.value if cfg.objective.weights == "fixed" else None,
                            input_weight=cfg.objective.input_weight, input_ref=env.hover_input)
    if cfg.mode == "sysid":
        amp = env.excitation_amplitude if cfg.data.amplitude is None else cfg.data.amplitude
        trajs = generate_excitation_data(dyn, theta_dyn, cfg.data.count, rng, horizon, amp, env.hover_input, sampler)
        if cfg.parameterization == "neural":
            model = NeuralDynamics.for_system(n, m)
            mode = SysIdMode(model, make_episodes(trajs, _spec(model), 0.0, rng, True), None)
            return Experiment(cfg, mode, None, None, trajs)
        mode = SysIdMode(dyn, make_episodes(trajs, _spec(dyn), 0.0, rng, True), theta_dyn)
        return Experiment(cfg, mode, theta_dyn, theta_dyn, trajs)
    if cfg.mode == "imitation":
        theta_star = np.concatenate([theta_dyn, theta_obj])
        trajs = generate_expert_demos(dyn, cost, theta_star, cfg.data.count, rng, horizon, sampler, cfg.solver_tol)
        mode = ImitationMode(dyn, cost, [], theta_star, cfg.solver_tol, cfg.residual)
        mode = mode.with_episodes(make_episodes(trajs, mode.spec, 0.0, rng))
        return Experiment(cfg, mode, theta_star, theta_star, trajs)
    policy = NeuralPolicy.for_system(n, m, cfg.policy_layout)
    ref_theta = None
    if cfg.data.reference == "optimal":
        trajs = generate_expert_demos(dyn, cost, np.concatenate([theta_dyn, theta_obj]), cfg.data.count, rng,
                                      horizon, sampler, cfg.solver_tol)
    else:
        ref_theta = MlpParams.random(policy.widths, rng, cfg.estimator.init_scale).flat
        trajs = [rollout_closed_loop(dyn, policy, sampler(rng), int(rng.integers(horizon[0], horizon[1] + 1)),
                                     ref_theta, theta_dyn) for _ in range(cfg.data.count)]
    mode = PolicyTuningMode(dyn, theta_dyn, policy, [], ref_theta)
    mode = mode.with_episodes(make_episodes(trajs, mode.spec, 0.0, rng))
    return Experiment(cfg, mode, ref_theta, None, trajs)


def _spec(dyn) -> ResidualSpec:
    return ResidualSpec(dyn.n, dyn.m, "state")


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


def _noise_model(cfg: ExperimentConfig, r: int) -> NoiseModel:
    e = cfg.estimator
    R = None if e.R is None else e.R * np.eye(r)
    return NoiseModel(cfg.sigma, R, e.r_scale)


def _diagnostics(exp: Experiment, state: EstimatorState):
    if exp.theta_star is None:
        return None, None
    err = float(np.linalg.norm(state.theta - exp.theta_star))
    try:
        V = lyapunov_value(exp.theta_star, state)
    except np.linalg.LinAlgError:
        V = None
    return err, V


def run_trial(cfg: ExperimentConfig, trial: int, exp: Experiment | None = None) -> TrialLog:
    """One online pass plus ``offline_epochs`` replays, logging one row per data point."""
    exp = exp or build_experiment(cfg)
    theta0 = exp.initial_theta(cfg, np.random.default_rng(trial_seed(cfg, trial, 0)))
    mode = exp.with_noise(cfg.sigma, np.random.default_rng(trial_seed(cfg, trial, 1)))
    N = mode.data_points
    total = N * (1 + cfg.offline_epochs)
    state = EstimatorState.initial(theta0, cfg.estimator.p0)
    noise = _noise_model(cfg, mode.spec.dim)
    out = TrialLog(trial)
    # The loss re-solves from a copy of the learner's warm starts so it follows the same local optimum
    # without perturbing the learner.
    cache: dict = {}
    err, V = _diagnostics(exp, state)
    out.rows.append(LogRow(trial, "init", 0, cumulative_loss(mode, state.theta, "clean", dict(cache)), None, err, V))
    counter = {"dp": 0}

    def make_callback(phase):
        def cb(st, rec):
            counter["dp"] += 1
            dp = counter["dp"]
            want = dp % cfg.loss_every == 0 or dp == N or dp == total
            loss = cumulative_loss(mode, st.theta, "clean", dict(cache)) if want else None
            err, V = _diagnostics(exp, st)
            t = (rec.ocil_ms, rec.gg_ms, rec.est_ms) if cfg.record_timing and not rec.failed else (None,) * 3
            out.rows.append(LogRow(trial, phase, dp, loss, rec.residual_norm, err, V, *t))
        return cb

    try:
        state, _ = run_online_phase(mode, state, noise, cfg.estimator.q, cache, make_callback("online"))
        state, _ = run_offline_phase(mode, state, cfg.offline_epochs, noise, cfg.estimator.q, cache,
                                     make_callback("offline"))
    except ConditioningError as exc:
        out.status, out.error = "failed", f"estimator conditioning failure: {exc}"
    out.theta = state.theta.copy()
    if out.final_loss is None and not out.failed:
        out.status, out.error = "failed", "loss could not be evaluated"
    return out


def baseline_pdp_gd(cfg: ExperimentConfig, trial: int = 0, exp: Experiment | None = None,
                    iterations: int | None = None) -> TrialLog:
    """Batch gradient descent ``theta <- theta - eta dL/dtheta`` on the clean data.

    Iteration ``k`` is logged at data point ``k N`` so the axis matches the online learner.
    """
    exp = exp or build_experiment(cfg)
    theta = exp.initial_theta(cfg, np.random.default_rng(trial_seed(cfg, trial, 0)))
    mode = exp.mode
    N = mode.data_points
    iterations = 1 + cfg.offline_epochs if iterations is None else iterations
    eta = cfg.baseline.learning_rate
    out = TrialLog(trial)
    cache: dict = {}
    for k in range(iterations + 1):
        loss, grad = loss_and_gradient(mode, theta, "clean", cache)
        if loss is None or not np.isfinite(loss):
            out.status, out.error = "diverged", f"loss undefined at iteration {k}"
            break
        err = None if exp.theta_star is None else float(np.linalg.norm(theta - exp.theta_star))
        out.rows.append(LogRow(trial, "baseline", k * N, loss, None, err))
        if k < iterations:
            theta = theta - eta * grad
            if not np.all(np.isfinite(theta)):
                out.status, out.error = "diverged", f"non-finite parameters at iteration {k + 1}"
                break
    out.theta = theta
    return out


def _trial_job(args):
    cfg, trial, baseline = args
    exp = build_experiment(cfg)
    return run_trial(cfg, trial, exp), (baseline_pdp_gd(cfg, trial, exp) if baseline else None)


def worker_count(cfg: ExperimentConfig) -> int:
    raw = os.environ.get("OCIL_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"OCIL_THREADS must be a positive integer, got {raw!r}") from None
    return min(cap, cfg.trials)


def run_trials(cfg: ExperimentConfig, baseline: bool | None = None):
    """All trials (and optional baselines), returned in trial order regardless of worker scheduling."""
    baseline = cfg.baseline.enabled if baseline is None else baseline
    jobs = [(cfg, i, baseline) for i in range(cfg.trials)]
    workers = worker_count(cfg)
    if workers <= 1:
        exp = build_experiment(cfg)
        results = [(run_trial(cfg, i, exp), baseline_pdp_gd(cfg, i, exp) if baseline else None)
                   for i in range(cfg.trials)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    logs = [r[0] for r in results]
    base = [r[1] for r in results if r[1] is not None]
    for lg in logs:
        if lg.failed:
            log.warning("trial %d failed: %s", lg.trial, lg.error)
    return logs, base


def summarize(logs: list[TrialLog]) -> dict:
    ratios = [lg.final_loss / lg.initial_loss for lg in logs
              if not lg.failed and lg.initial_loss and lg.final_loss is not None]
    return {
        "trials": len(logs),
        "failed": sum(lg.failed for lg in logs),
        "median_ratio": float(np.median(ratios)) if ratios else None,
        "median_final_loss": float(np.median([lg.final_loss for lg in logs if lg.final_loss is not None]))
        if any(lg.final_loss is not None for lg in logs) else None,
    }
