"""Independent oracles and the checks for acceptance criteria 1-9.

The oracles deliberately avoid the code paths they test: LQ problems are
checked against a dense KKT solve and an affine Riccati recursion, the
estimator against batch regularized least squares, and PDP against
finite differences of re-solved trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .diffcore import relative_error
from .estimator import EstimatorState, NoiseModel, ekf_predict, ekf_update, lyapunov_value
from .harness.config import BaselineConfig, DataConfig, EstimatorConfig, ExperimentConfig
from .harness.runner import baseline_pdp_gd, build_experiment, run_trial
from .models import AffineParamDynamics, make_environment
from .modes import sample_initial_state
from .ocp import (OCProblem, QuadraticCost, WeightedGoalCost, compute_costates, solve_ocp, stationarity_residual,
                  total_cost)
from .pdp import open_loop_gradient, trajectory_gradient


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f} s)"


# ---------------------------------------------------------------------------
# LQ instances and oracles
# ---------------------------------------------------------------------------


@dataclass
class LqInstance:
    problem: OCProblem
    A0: np.ndarray
    B0: np.ndarray
    A_theta: np.ndarray
    B_theta: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    g0: np.ndarray
    S: np.ndarray

    @property
    def pd(self) -> int:
        return self.A_theta.shape[0]


def _spd(rng, k, floor=0.2):
    M = rng.standard_normal((k, k))
    return M @ M.T / k + floor * np.eye(k)


def random_lq(rng: np.random.Generator, n: int, m: int, T: int, pd: int = 2, pc: int = 1) -> LqInstance:
    """LQ problem with parameters in A, B, an affine drift and the goal."""
    A0 = np.eye(n) + 0.2 * rng.standard_normal((n, n)) / np.sqrt(n)
    B0 = 0.5 * rng.standard_normal((n, m))
    A_theta = 0.1 * rng.standard_normal((pd, n, n))
    B_theta = 0.1 * rng.standard_normal((pd, n, m))
    D = 0.2 * rng.standard_normal((n, pd))
    Q, R, Qf = _spd(rng, n), _spd(rng, m), _spd(rng, n)
    g0 = rng.standard_normal(n)
    S = rng.standard_normal((n, pc))
    dyn = AffineParamDynamics(A0, B0, A_theta, B_theta, D)
    cost = QuadraticCost(Q, R, Qf, g0, S)
    theta = 0.5 * rng.standard_normal(pd + pc)
    problem = OCProblem(dyn, cost, T, rng.standard_normal(n), theta)
    return LqInstance(problem, A0, B0, A_theta, B_theta, D, Q, R, Qf, g0, S)


def riccati_solution(inst: LqInstance, theta=None):
    """Affine Riccati recursion: returns ``(J*, P_t, p_t, trajectory states, inputs)``.

    ``V_t(x) = x' P_t x + 2 p_t' x + s_t``.
    """
    pr = inst.problem
    theta = pr.theta if theta is None else np.asarray(theta, dtype=float)
    td, tc = theta[:inst.pd], theta[inst.pd:]
    A = inst.A0 + np.tensordot(td, inst.A_theta, axes=1)
    B = inst.B0 + np.tensordot(td, inst.B_theta, axes=1)
    e = inst.D @ td
    g = inst.g0 + inst.S @ tc
    T, n = pr.horizon, pr.n
    P = np.empty((T + 1, n, n)); p = np.empty((T + 1, n)); s = np.empty(T + 1)
    K = []; k = []
    P[T], p[T], s[T] = inst.Qf, -inst.Qf @ g, g @ inst.Qf @ g
    for t in range(T - 1, -1, -1):
        Pn, pn = P[t + 1], p[t + 1]
        Quu = inst.R + B.T @ Pn @ B
        Qux = B.T @ Pn @ A
        qu = B.T @ (Pn @ e + pn)
        Qxx = inst.Q + A.T @ Pn @ A
        qx = -inst.Q @ g + A.T @ (Pn @ e + pn)
        sol = np.linalg.solve(Quu, np.column_stack([Qux, qu]))
        P[t] = Qxx - Qux.T @ sol[:, :n]
        P[t] = 0.5 * (P[t] + P[t].T)
        p[t] = qx - Qux.T @ sol[:, n]
        s[t] = g @ inst.Q @ g + e @ Pn @ e + 2 * pn @ e + s[t + 1] - qu @ sol[:, n]
        K.insert(0, -sol[:, :n]); k.insert(0, -sol[:, n])
    xs = np.empty((T + 1, n)); us = np.empty((T, pr.m))
    xs[0] = pr.x0
    for t in range(T):
        us[t] = K[t] @ xs[t] + k[t]
        xs[t + 1] = A @ xs[t] + B @ us[t] + e
    J = float(pr.x0 @ P[0] @ pr.x0 + 2 * p[0] @ pr.x0 + s[0])
    return J, P, p, xs, us


def kkt_gradient(inst: LqInstance):
    """Exact d(x_0..x_T, u_0..u_{T-1})/dtheta by implicit differentiation of the dense KKT system."""
    pr = inst.problem
    T, n, m, pd = pr.horizon, pr.n, pr.m, inst.pd
    p = pr.p
    theta = pr.theta
    td, tc = theta[:pd], theta[pd:]
    A = inst.A0 + np.tensordot(td, inst.A_theta, axes=1)
    B = inst.B0 + np.tensordot(td, inst.B_theta, axes=1)
    g = inst.g0 + inst.S @ tc
    nx, nu = T * n, T * m
    nw = nx + nu

    def xi(t):  # column block of x_t, t = 1..T
        return slice((t - 1) * n, t * n)

    def ui(t):
        return slice(nx + t * m, nx + (t + 1) * m)

    H = np.zeros((nw, nw)); h = np.zeros(nw)
    for t in range(1, T + 1):
        W = inst.Qf if t == T else inst.Q
        H[xi(t), xi(t)] = 2 * W
        h[xi(t)] = 2 * W @ g
    for t in range(T):
        H[ui(t), ui(t)] = 2 * inst.R

    def constraints(Am, Bm):
        C = np.zeros((nx, nw))
        for t in range(T):
            rows = slice(t * n, (t + 1) * n)
            C[rows, xi(t + 1)] = np.eye(n)
            C[rows, ui(t)] = -Bm
            if t >= 1:
                C[rows, xi(t)] = -Am
        return C

    C = constraints(A, B)
    d = np.tile(inst.D @ td, T)
    d[:n] += A @ pr.x0
    K = np.block([[H, C.T], [C, np.zeros((nx, nx))]])
    sol = np.linalg.solve(K, np.concatenate([h, d]))
    dsol = np.empty((nw + nx, p))
    for i in range(p):
        dr = np.zeros(nw + nx)
        if i < pd:
            dC = constraints(inst.A_theta[i], inst.B_theta[i]) - constraints(np.zeros_like(A), np.zeros_like(B))
            dC_full = np.block([[np.zeros((nw, nw)), dC.T], [dC, np.zeros((nx, nx))]])
            dd = np.tile(inst.D[:, i], T)
            dd[:n] += inst.A_theta[i] @ pr.x0
            dr[nw:] = dd
            dr -= dC_full @ sol
        else:
            dg = inst.S[:, i - pd]
            for t in range(1, T + 1):
                W = inst.Qf if t == T else inst.Q
                dr[xi(t)] = 2 * W @ dg
        dsol[:, i] = np.linalg.solve(K, dr)
    dX = np.vstack([np.zeros((n, p)), dsol[:nx]])
    dU = dsol[nx:nw]
    return np.vstack([dX, dU])


def fd_resolve_gradient(problem: OCProblem, nominal, step: float = 1e-5, tol: float = 1e-12) -> np.ndarray:
    """Central differences of re-solved trajectories, warm-started from ``nominal``."""
    cols = []
    for j in range(problem.p):
        e = np.zeros(problem.p)
        e[j] = step
        plus = solve_ocp(problem.with_theta(problem.theta + e), warm_start=nominal, tol=tol).stacked()
        minus = solve_ocp(problem.with_theta(problem.theta - e), warm_start=nominal, tol=tol).stacked()
        cols.append((plus - minus) / (2 * step))
    return np.stack(cols, axis=1)


def batch_least_squares(theta0, P0, As, ys, Rs):
    """``argmin (th - th0)' P0^-1 (th - th0) + sum (y - A th)' R^-1 (y - A th)``."""
    Pinv = np.linalg.inv(P0)
    lhs = Pinv.copy()
    rhs = Pinv @ theta0
    for A, y, R in zip(As, ys, Rs):
        Ri = np.linalg.inv(R)
        lhs += A.T @ Ri @ A
        rhs += A.T @ Ri @ y
    return np.linalg.solve(lhs, rhs)


def random_linear_stream(rng, p: int, r: int, steps: int, sigma: float = 0.0):
    theta_star = rng.standard_normal(p)
    As = [rng.standard_normal((r, p)) for _ in range(steps)]
    ys = [A @ theta_star + sigma * rng.standard_normal(r) for A in As]
    Rs = [_spd(rng, r, 0.5) for _ in range(steps)]
    return theta_star, As, ys, Rs


def cartpole_imitation_instance(rng, T: int = 20) -> OCProblem:
    env = make_environment("cartpole", dt=0.1)
    cost = WeightedGoalCost(env.goal, 1, "scalar")
    theta = np.r_[env.theta_star * rng.uniform(0.8, 1.2, 3), rng.uniform(0.5, 2.0)]
    return OCProblem(env.dynamics, cost, T, sample_initial_state(4, rng, 0.5), theta)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def _timed(number: int, name: str, fn: Callable[[], tuple[bool, str]], budget: float | None = None):
    t0 = time.perf_counter()
    ok, detail = fn()
    dt = time.perf_counter() - t0
    if budget is not None and dt > budget:
        ok, detail = False, f"{detail}; runtime {dt:.1f} s exceeds {budget:.0f} s"
    return CriterionResult(number, name, ok, detail, dt)


def check_gradient_exactness(seed: int = 0) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        worst_fd, worst_kkt = 0.0, 0.0
        for _ in range(10):
            pr = cartpole_imitation_instance(rng)
            traj = solve_ocp(pr, tol=1e-12)
            g = trajectory_gradient(pr, traj).stacked()
            worst_fd = max(worst_fd, relative_error(g, fd_resolve_gradient(pr, traj)))
        for i in range(20):
            dims = (1, 1) if i < 10 else (int(rng.integers(2, 5)), int(rng.integers(1, 3)))
            inst = random_lq(rng, *dims, T=int(rng.integers(5, 15)))
            traj = solve_ocp(inst.problem, tol=1e-12)
            g = trajectory_gradient(inst.problem, traj).stacked()
            worst_fd = max(worst_fd, relative_error(g, fd_resolve_gradient(inst.problem, traj)))
            worst_kkt = max(worst_kkt, relative_error(g, kkt_gradient(inst)))
        ok = worst_fd <= 1e-4 and worst_kkt <= 1e-8
        return ok, f"max FD rel err {worst_fd:.2e} (tol 1e-4), max analytic rel err {worst_kkt:.2e} (tol 1e-8)"
    return _timed(1, "gradient exactness", run, 60)


def check_estimator_rls(seed: int = 0) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(20):
            p, r = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            _, As, ys, Rs = random_linear_stream(rng, p, r, 100, sigma=0.1)
            theta0 = rng.standard_normal(p)
            # Cumulative normal equations give the batch oracle at every prefix.
            Pinv = np.eye(p) / 10.0
            lhs, rhs = Pinv.copy(), Pinv @ theta0
            state = EstimatorState.initial(theta0, 10.0)
            for A, y, R in zip(As, ys, Rs):
                l = y - A @ state.theta
                state = ekf_update(ekf_predict(state), -A, l, R)
                Ri = np.linalg.inv(R)
                lhs += A.T @ Ri @ A
                rhs += A.T @ Ri @ y
                worst = max(worst, float(np.max(np.abs(state.theta - np.linalg.solve(lhs, rhs)))))
        return worst <= 1e-8, f"max deviation from batch LS {worst:.2e} (tol 1e-8)"
    return _timed(2, "estimator equals batch least squares", run, 5)


def _cfg(**kw) -> ExperimentConfig:
    base = dict(environment="cartpole", record_timing=False, loss_every=10**9)
    base.update(kw)
    return ExperimentConfig(**base)


def check_sysid_noise_free() -> CriterionResult:
    def run():
        cfg = _cfg(mode="sysid", sigma=0.0, trials=1, offline_epochs=20)
        exp = build_experiment(cfg)
        lg = run_trial(cfg, 0, exp)
        err = float(np.max(np.abs(lg.theta - exp.theta_star)))
        ratio = lg.final_loss / lg.initial_loss
        return err <= 1e-3 and ratio <= 1e-6 and not lg.failed, \
            f"|theta - theta*|_inf = {err:.2e} (tol 1e-3), loss ratio {ratio:.2e} (tol 1e-6)"
    return _timed(3, "noise-free SysID recovery", run, 30)


def check_sysid_noisy() -> CriterionResult:
    def run():
        cfg = _cfg(mode="sysid", sigma=0.05, trials=5, offline_epochs=20,
                   baseline=BaselineConfig(enabled=True, learning_rate=1e-4))
        exp = build_experiment(cfg)
        logs = [run_trial(cfg, i, exp) for i in range(cfg.trials)]
        base = [baseline_pdp_gd(cfg, i, exp) for i in range(cfg.trials)]
        ratio = float(np.median([lg.final_loss / lg.initial_loss for lg in logs]))
        final = float(np.median([lg.final_loss for lg in logs]))
        bfinal = float(np.median([b.final_loss for b in base]))
        same_budget = all(b.rows[-1].data_point == lg.rows[-1].data_point for b, lg in zip(base, logs))
        ok = ratio <= 0.05 and final < bfinal and same_budget
        return ok, (f"median loss ratio {ratio:.2e} (tol 5e-2), median final {final:.3e} vs baseline {bfinal:.3e}"
                    f", equal budget {same_budget}")
    return _timed(4, "noisy SysID beats baseline", run, 120)


def check_imitation() -> CriterionResult:
    def run():
        ratios = {}
        for sigma in (0.1, 0.0):
            cfg = _cfg(mode="imitation", sigma=sigma, trials=5, offline_epochs=20)
            exp = build_experiment(cfg)
            logs = [run_trial(cfg, i, exp) for i in range(cfg.trials)]
            ratios[sigma] = float(np.median([lg.final_loss / lg.initial_loss for lg in logs]))
        ok = ratios[0.1] <= 0.05 and ratios[0.0] <= 1e-4
        return ok, f"median ratio sigma=0.1: {ratios[0.1]:.2e} (tol 5e-2), noise-free: {ratios[0.0]:.2e} (tol 1e-4)"
    return _timed(5, "imitation learning convergence", run, 300)


def check_policy_tuning() -> CriterionResult:
    def run():
        cfg = _cfg(mode="policy", sigma=0.1, trials=5, offline_epochs=20)
        exp = build_experiment(cfg)
        logs = [run_trial(cfg, i, exp) for i in range(cfg.trials)]
        reduction = 1.0 - float(np.median([lg.final_loss / lg.initial_loss for lg in logs]))
        return reduction >= 0.9, f"median tracking-loss reduction {100 * reduction:.2f}% (need >= 90%)"
    return _timed(6, "policy tuning on the fly", run, 300)


def check_riccati(seed: int = 1) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        worst_J = worst_lam = worst_stat = 0.0
        for i in range(20):
            dims = (1, 1) if i < 5 else (int(rng.integers(2, 6)), int(rng.integers(1, 4)))
            inst = random_lq(rng, *dims, T=int(rng.integers(3, 25)))
            traj = solve_ocp(inst.problem)
            J, P, p, _, _ = riccati_solution(inst)
            lam = compute_costates(inst.problem, traj).lams
            grads = np.stack([2 * (P[t] @ traj.xs[t] + p[t]) for t in range(inst.problem.horizon + 1)])
            worst_J = max(worst_J, abs(total_cost(inst.problem, traj) - J) / max(1.0, abs(J)))
            worst_lam = max(worst_lam, float(np.max(np.abs(lam - grads))) / max(1.0, float(np.max(np.abs(grads)))))
            worst_stat = max(worst_stat, stationarity_residual(inst.problem, traj))
        for _ in range(10):
            pr = cartpole_imitation_instance(rng)
            worst_stat = max(worst_stat, stationarity_residual(pr, solve_ocp(pr)))
        ok = worst_J <= 1e-8 and worst_lam <= 1e-8 and worst_stat <= 1e-6
        return ok, f"cost err {worst_J:.2e}, costate err {worst_lam:.2e} (tol 1e-8), stationarity {worst_stat:.2e} (tol 1e-6)"
    return _timed(7, "Riccati agreement", run)


def lyapunov_trace(theta_star, theta0, As, ys, noise, p0: float = 10.0) -> list[float]:
    state = EstimatorState.initial(theta0, p0)
    V = [lyapunov_value(theta_star, state)]
    for A, y in zip(As, ys):
        prior = ekf_predict(state)
        state = ekf_update(prior, -A, y - A @ prior.theta, noise)
        V.append(lyapunov_value(theta_star, state))
    return V


def check_lyapunov(seed: int = 2) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = np.inf
        for i in range(20):
            p, r = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            theta_star, As, ys, Rs = random_linear_stream(rng, p, r, 100)
            theta0 = theta_star + rng.standard_normal(p)
            noise = NoiseModel() if i % 2 else NoiseModel(R=Rs[0])
            V = np.array(lyapunov_trace(theta_star, theta0, As, ys, noise))
            worst = min(worst, float(np.min(V[:-1] - V[1:])))
        return worst >= -1e-10, f"smallest per-step decrease {worst:.2e} (tol -1e-10)"
    return _timed(8, "Lyapunov monotonicity", run)


def fixed_point_runs(epochs: int = 2):
    """Run every mode from theta0 = theta* with sigma = 0; returns ``{mode: (max residual, theta changed)}``."""
    out = {}
    for mode, extra in (("sysid", {}), ("imitation", {}), ("policy", {"data": DataConfig(reference="policy")})):
        cfg = _cfg(mode=mode, sigma=0.0, trials=1, offline_epochs=epochs, **extra)
        exp = build_experiment(cfg)
        cfg = replace(cfg, estimator=EstimatorConfig(theta0=list(map(float, exp.theta_star))))
        lg = run_trial(cfg, 0, exp)
        resid = max(r.residual_norm for r in lg.rows if r.phase != "init")
        out[mode] = (resid, not np.array_equal(lg.theta, exp.theta_star), lg.final_loss)
    return out


def theta_independent_gradients(seed: int = 3) -> float:
    """Largest |entry| of gradients of problems whose trajectory does not depend on theta."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        dyn = AffineParamDynamics(np.eye(n) + 0.1 * rng.standard_normal((n, n)), rng.standard_normal((n, m)))
        pr = OCProblem(dyn, QuadraticCost(_spd(rng, n), _spd(rng, m)), 10, rng.standard_normal(n), np.zeros(1))
        traj = solve_ocp(pr)
        worst = max(worst, float(np.max(np.abs(trajectory_gradient(pr, traj).stacked()))))
        worst = max(worst, float(np.max(np.abs(open_loop_gradient(dyn, traj, np.zeros(1)).stacked()))))
    return worst


def check_fixed_point() -> CriterionResult:
    def run():
        res = fixed_point_runs()
        zero_grad = theta_independent_gradients()
        ok = all(r == 0.0 and not changed and loss == 0.0 for r, changed, loss in res.values()) and zero_grad == 0.0
        parts = ", ".join(f"{k}: max residual {r:.1e}, theta changed {c}" for k, (r, c, _) in res.items())
        return ok, f"{parts}; theta-independent gradient max {zero_grad:.1e}"
    return _timed(9, "fixed point and zero cases", run)


CRITERIA = {
    1: check_gradient_exactness,
    2: check_estimator_rls,
    3: check_sysid_noise_free,
    4: check_sysid_noisy,
    5: check_imitation,
    6: check_policy_tuning,
    7: check_riccati,
    8: check_lyapunov,
    9: check_fixed_point,
}


def run_all(numbers=None, echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    results = []
    for k in numbers or sorted(CRITERIA):
        res = CRITERIA[k]()
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
