"""Parameterized optimal control problems, the iLQR forward solver, costates and rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import DiscreteDynamics, NeuralPolicy

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """iLQR did not reach the stationarity tolerance; carries the best iterate."""

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DivergenceError(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


@dataclass
class StageDerivs:
    cx: np.ndarray
    cu: np.ndarray
    ct: np.ndarray
    cxx: np.ndarray
    cxu: np.ndarray
    cuu: np.ndarray
    cxt: np.ndarray
    cut: np.ndarray


@dataclass
class TerminalDerivs:
    hx: np.ndarray
    ht: np.ndarray
    hxx: np.ndarray
    hxt: np.ndarray


class Cost:
    """Stage cost ``c(x, u, theta_c)`` plus terminal cost ``h(x, theta_c)``."""

    n: int
    m: int
    p: int = 0

    def stage(self, x, u, theta) -> float:
        raise NotImplementedError

    def terminal(self, x, theta) -> float:
        raise NotImplementedError

    def stage_derivs(self, x, u, theta) -> StageDerivs:
        raise NotImplementedError

    def terminal_derivs(self, x, theta) -> TerminalDerivs:
        raise NotImplementedError


class ZeroCost(Cost):
    """``J = 0``: the forward problem degenerates to a pure rollout."""

    def __init__(self, n: int, m: int):
        self.n, self.m, self.p = n, m, 0

    def stage(self, x, u, theta):
        return 0.0

    def terminal(self, x, theta):
        return 0.0

    def stage_derivs(self, x, u, theta):
        n, m = self.n, self.m
        return StageDerivs(np.zeros(n), np.zeros(m), np.zeros(0), np.zeros((n, n)), np.zeros((n, m)),
                           np.zeros((m, m)), np.zeros((n, 0)), np.zeros((m, 0)))

    def terminal_derivs(self, x, theta):
        n = self.n
        return TerminalDerivs(np.zeros(n), np.zeros(0), np.zeros((n, n)), np.zeros((n, 0)))


class QuadraticCost(Cost):
    """``(x - g)' Q (x - g) + u' R u`` with terminal ``(x - g)' Qf (x - g)``.

    The goal ``g = goal + S theta`` may depend linearly on the cost parameters.
    """

    def __init__(self, Q, R, Qf=None, goal=None, goal_theta=None):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.Qf = self.Q if Qf is None else np.atleast_2d(np.asarray(Qf, dtype=float))
        self.n, self.m = self.Q.shape[0], self.R.shape[0]
        self.goal = np.zeros(self.n) if goal is None else np.asarray(goal, dtype=float)
        self.S = np.zeros((self.n, 0)) if goal_theta is None else np.asarray(goal_theta, dtype=float).reshape(self.n, -1)
        self.p = self.S.shape[1]

    def _d(self, x, theta):
        return np.asarray(x, dtype=float) - self.goal - self.S @ np.asarray(theta, dtype=float)

    def stage(self, x, u, theta):
        d = self._d(x, theta)
        u = np.asarray(u, dtype=float)
        return float(d @ self.Q @ d + u @ self.R @ u)

    def terminal(self, x, theta):
        d = self._d(x, theta)
        return float(d @ self.Qf @ d)

    def stage_derivs(self, x, u, theta):
        d = self._d(x, theta)
        u = np.asarray(u, dtype=float)
        Qd = self.Q @ d
        return StageDerivs(2 * Qd, 2 * self.R @ u, -2 * self.S.T @ Qd, 2 * self.Q, np.zeros((self.n, self.m)),
                           2 * self.R, -2 * self.Q @ self.S, np.zeros((self.m, self.p)))

    def terminal_derivs(self, x, theta):
        d = self._d(x, theta)
        Qd = self.Qf @ d
        return TerminalDerivs(2 * Qd, -2 * self.S.T @ Qd, 2 * self.Qf, -2 * self.Qf @ self.S)


class WeightedGoalCost(Cost):
    """``sum_i w_i (x_i - g_i)^2 + r |u - u_ref|^2``, terminal ``sum_i w_i (x_i - g_i)^2``.

    ``weights="scalar"`` learns one weight for every state, ``"diag"`` one per
    state, and ``"fixed"`` uses ``fixed_weights`` with no learnable parameter.
    """

    def __init__(self, goal, m: int, weights: str = "scalar", fixed_weights=None,
                 input_weight: float = 1.0, input_ref=None):
        self.goal = np.asarray(goal, dtype=float)
        self.n, self.m = self.goal.size, m
        if weights not in ("scalar", "diag", "fixed"):
            raise ValueError(f"unknown weight mode {weights!r}")
        self.mode = weights
        self.p = {"scalar": 1, "diag": self.n, "fixed": 0}[weights]
        if weights == "fixed" and fixed_weights is None:
            raise ValueError("fixed weight mode needs fixed_weights")
        self.fixed = None if fixed_weights is None else np.broadcast_to(np.asarray(fixed_weights, dtype=float), (self.n,)).copy()
        self.r = float(input_weight)
        self.u_ref = np.zeros(m) if input_ref is None else np.asarray(input_ref, dtype=float)
        self._cxu = np.zeros((self.n, self.m))
        self._cuu = 2 * self.r * np.eye(self.m)
        self._cut = np.zeros((self.m, self.p))

    def _w(self, theta):
        if self.mode == "fixed":
            return self.fixed
        if self.mode == "scalar":
            return np.full(self.n, float(theta[0]))
        return np.asarray(theta, dtype=float)

    def stage(self, x, u, theta):
        d = np.asarray(x, dtype=float) - self.goal
        du = np.asarray(u, dtype=float) - self.u_ref
        return float(self._w(theta) @ d**2 + self.r * du @ du)

    def terminal(self, x, theta):
        d = np.asarray(x, dtype=float) - self.goal
        return float(self._w(theta) @ d**2)

    def _theta_terms(self, d):
        if self.mode == "scalar":
            return np.array([d @ d]), 2 * d[:, None]
        if self.mode == "diag":
            return d**2, np.diag(2 * d)
        return np.zeros(0), np.zeros((self.n, 0))

    def stage_derivs(self, x, u, theta):
        d = np.asarray(x, dtype=float) - self.goal
        w = self._w(theta)
        du = np.asarray(u, dtype=float) - self.u_ref
        ct, cxt = self._theta_terms(d)
        return StageDerivs(2 * w * d, 2 * self.r * du, ct, np.diag(2 * w), self._cxu, self._cuu, cxt, self._cut)

    def terminal_derivs(self, x, theta):
        d = np.asarray(x, dtype=float) - self.goal
        w = self._w(theta)
        ht, hxt = self._theta_terms(d)
        return TerminalDerivs(2 * w * d, ht, np.diag(2 * w), hxt)


# ---------------------------------------------------------------------------
# Problem and trajectory types
# ---------------------------------------------------------------------------


@dataclass
class OCProblem:
    """``min sum_t c(x_t, u_t) + h(x_T)`` s.t. ``x_{t+1} = f(x_t, u_t)``.

    ``theta`` is laid out as ``[dynamics parameters, cost parameters]``.
    """

    dynamics: DiscreteDynamics
    cost: Cost
    horizon: int
    x0: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.x0 = np.asarray(self.x0, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.x0.shape != (self.dynamics.n,):
            raise ValueError(f"x0 has shape {self.x0.shape}, expected ({self.dynamics.n},)")
        if self.cost.n != self.dynamics.n or self.cost.m != self.dynamics.m:
            raise ValueError("cost and dynamics dimensions disagree")
        if self.theta.shape != (self.p,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({self.p},)")

    @property
    def n(self):
        return self.dynamics.n

    @property
    def m(self):
        return self.dynamics.m

    @property
    def p(self):
        return self.dynamics.p + self.cost.p

    @property
    def theta_dyn(self):
        return self.theta[:self.dynamics.p]

    @property
    def theta_cost(self):
        return self.theta[self.dynamics.p:]

    def with_theta(self, theta) -> "OCProblem":
        return OCProblem(self.dynamics, self.cost, self.horizon, self.x0, np.asarray(theta, dtype=float))


@dataclass
class Trajectory:
    xs: np.ndarray  # (T+1, n)
    us: np.ndarray  # (T, m)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        if self.xs.ndim != 2 or self.us.ndim != 2 or self.xs.shape[0] != self.us.shape[0] + 1:
            raise ValueError("trajectory needs T+1 states and T inputs")

    @property
    def horizon(self) -> int:
        return self.us.shape[0]

    def copy(self) -> "Trajectory":
        return Trajectory(self.xs.copy(), self.us.copy())

    def stacked(self) -> np.ndarray:
        """col{x_0..x_T, u_0..u_{T-1}}."""
        return np.concatenate([self.xs.ravel(), self.us.ravel()])


@dataclass
class CostateTrajectory:
    lams: np.ndarray  # (T+1, n); lams[t] = lambda_t, lams[0] is the gradient w.r.t. x_0


def rollout_open_loop(dyn: DiscreteDynamics, x0, us, theta) -> Trajectory:
    us = np.atleast_2d(np.asarray(us, dtype=float))
    if us.shape[1] != dyn.m and us.shape[0] == dyn.m:
        us = us.T
    xs = np.empty((us.shape[0] + 1, dyn.n))
    xs[0] = x0
    for t, u in enumerate(us):
        xs[t + 1] = dyn.step(xs[t], u, theta)
        if not np.all(np.isfinite(xs[t + 1])):
            raise DivergenceError(f"non-finite state at step {t + 1}", t + 1)
    return Trajectory(xs, us)


def rollout_closed_loop(dyn: DiscreteDynamics, policy: NeuralPolicy, x0, horizon: int, theta,
                        dyn_theta=()) -> Trajectory:
    """``u_t = mu(x_t, theta)``, ``x_{t+1} = f(x_t, u_t, dyn_theta)``."""
    if policy.n != dyn.n or policy.m != dyn.m:
        raise ValueError("policy widths do not match the dynamics")
    xs = np.empty((horizon + 1, dyn.n))
    us = np.empty((horizon, dyn.m))
    xs[0] = x0
    for t in range(horizon):
        us[t] = policy(xs[t], theta)
        xs[t + 1] = dyn.step(xs[t], us[t], dyn_theta)
        if not np.all(np.isfinite(xs[t + 1])):
            raise DivergenceError(f"non-finite state at step {t + 1}", t + 1)
    return Trajectory(xs, us)


def total_cost(problem: OCProblem, traj: Trajectory) -> float:
    if traj.horizon != problem.horizon:
        raise ValueError("trajectory length does not match the horizon")
    tc = problem.theta_cost
    J = sum(problem.cost.stage(x, u, tc) for x, u in zip(traj.xs[:-1], traj.us))
    return float(J + problem.cost.terminal(traj.xs[-1], tc))


def compute_costates(problem: OCProblem, traj: Trajectory) -> CostateTrajectory:
    """``lam_T = dh/dx_T``, ``lam_t = dc/dx_t + F_t' lam_{t+1}``."""
    T = problem.horizon
    td, tc = problem.theta_dyn, problem.theta_cost
    lams = np.empty((T + 1, problem.n))
    lams[T] = problem.cost.terminal_derivs(traj.xs[T], tc).hx
    for t in range(T - 1, -1, -1):
        F, _, _ = problem.dynamics.jacobians(traj.xs[t], traj.us[t], td)
        lams[t] = problem.cost.stage_derivs(traj.xs[t], traj.us[t], tc).cx + F.T @ lams[t + 1]
    return CostateTrajectory(lams)


def stationarity_residual(problem: OCProblem, traj: Trajectory, costates: CostateTrajectory | None = None) -> float:
    """``max_t |dc/du_t + G_t' lam_{t+1}|_inf``."""
    if costates is None:
        costates = compute_costates(problem, traj)
    td, tc = problem.theta_dyn, problem.theta_cost
    worst = 0.0
    for t in range(problem.horizon):
        _, G, _ = problem.dynamics.jacobians(traj.xs[t], traj.us[t], td)
        Hu = problem.cost.stage_derivs(traj.xs[t], traj.us[t], tc).cu + G.T @ costates.lams[t + 1]
        worst = max(worst, float(np.max(np.abs(Hu))) if Hu.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# iLQR
# ---------------------------------------------------------------------------


@dataclass
class _Linearization:
    F: np.ndarray
    G: np.ndarray
    cx: np.ndarray
    cu: np.ndarray
    cxx: np.ndarray
    cxu: np.ndarray
    cuu: np.ndarray
    hx: np.ndarray
    hxx: np.ndarray
    lams: np.ndarray
    stationarity: float


@dataclass
class IlqrSolver:
    """iLQR with Levenberg-Marquardt regularization and a backtracking line search.

    While the stationarity residual is below ``second_order_below`` (always, by
    default) the backward pass adds the value-gradient-weighted dynamics
    curvature (a DDP step) and falls back to Gauss-Newton curvature when that
    step is indefinite or rejected.  The second-order terms give quadratic
    convergence and avoid Gauss-Newton zigzagging in nonconvex regions.  ``mu I`` is added to the
    input Hessian when its smallest eigenvalue is below ``reg_below`` or after
    a rejected step.  Single use per solve.
    """

    problem: OCProblem
    tol: float = 1e-6
    max_iter: int = 200
    mu_init: float = 1e-6
    mu_max: float = 1e10
    reg_below: float = 1e-6
    backtracks: int = 20
    min_improvement: float = 1e-9
    second_order_below: float = np.inf
    history: list = field(default_factory=list)
    iterations: int = 0

    def _linearize(self, traj: Trajectory) -> _Linearization:
        pr = self.problem
        T, n, m = pr.horizon, pr.n, pr.m
        td, tc = pr.theta_dyn, pr.theta_cost
        F = np.empty((T, n, n)); G = np.empty((T, n, m))
        cx = np.empty((T, n)); cu = np.empty((T, m))
        cxx = np.empty((T, n, n)); cxu = np.empty((T, n, m)); cuu = np.empty((T, m, m))
        for t in range(T):
            F[t], G[t], _ = pr.dynamics.jacobians(traj.xs[t], traj.us[t], td)
            d = pr.cost.stage_derivs(traj.xs[t], traj.us[t], tc)
            cx[t], cu[t], cxx[t], cxu[t], cuu[t] = d.cx, d.cu, d.cxx, d.cxu, d.cuu
        term = pr.cost.terminal_derivs(traj.xs[T], tc)
        lams = np.empty((T + 1, n))
        lams[T] = term.hx
        stat = 0.0
        for t in range(T - 1, -1, -1):
            Hu = cu[t] + G[t].T @ lams[t + 1]
            stat = max(stat, float(np.max(np.abs(Hu))))
            lams[t] = cx[t] + F[t].T @ lams[t + 1]
        return _Linearization(F, G, cx, cu, cxx, cxu, cuu, term.hx, term.hxx, lams, stat)

    def _backward(self, traj: Trajectory, lin: _Linearization, mu: float, second_order: bool):
        pr = self.problem
        T, m = pr.horizon, pr.m
        Vx, Vxx = lin.hx.copy(), lin.hxx.copy()
        ks = np.empty((T, m)); Ks = np.empty((T, m, pr.n))
        dJ1 = dJ2 = 0.0
        for t in range(T - 1, -1, -1):
            F, G = lin.F[t], lin.G[t]
            Qx = lin.cx[t] + F.T @ Vx
            Qu = lin.cu[t] + G.T @ Vx
            Qxx = lin.cxx[t] + F.T @ Vxx @ F
            Qux = lin.cxu[t].T + G.T @ Vxx @ F
            Quu = lin.cuu[t] + G.T @ Vxx @ G
            if second_order:
                hb = pr.dynamics.hessians(traj.xs[t], traj.us[t], pr.theta_dyn, Vx)
                Qxx = Qxx + hb.xx
                Qux = Qux + hb.xu.T
                Quu = Quu + hb.uu
            Quu_reg = 0.5 * (Quu + Quu.T)
            low = np.linalg.eigvalsh(Quu_reg)[0]
            if mu > self.mu_init or low < self.reg_below:
                Quu_reg = Quu_reg + mu * np.eye(m)
                low += mu
            if not low > 0:
                return None
            sol = np.linalg.solve(Quu_reg, np.column_stack([Qu, Qux]))
            k, K = -sol[:, 0], -sol[:, 1:]
            ks[t], Ks[t] = k, K
            dJ1 += k @ Qu
            dJ2 += 0.5 * k @ Quu @ k
            Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
            Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
            Vxx = 0.5 * (Vxx + Vxx.T)
        return ks, Ks, dJ1, dJ2

    def _forward(self, traj: Trajectory, ks, Ks, alpha: float) -> Trajectory:
        pr = self.problem
        xs = np.empty_like(traj.xs)
        us = np.empty_like(traj.us)
        xs[0] = pr.x0
        # a too-long trial step may overflow; the divergence check rejects it
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(pr.horizon):
                us[t] = traj.us[t] + alpha * ks[t] + Ks[t] @ (xs[t] - traj.xs[t])
                xs[t + 1] = pr.dynamics.step(xs[t], us[t], pr.theta_dyn)
                if not np.all(np.isfinite(xs[t + 1])):
                    raise DivergenceError(f"non-finite state at step {t + 1}", t + 1)
        return Trajectory(xs, us)

    def solve(self, warm_start: Trajectory | None = None) -> Trajectory:
        pr = self.problem
        us = np.zeros((pr.horizon, pr.m)) if warm_start is None else np.array(warm_start.us, dtype=float)
        if us.shape != (pr.horizon, pr.m):
            raise ValueError("warm start has the wrong shape")
        traj = rollout_open_loop(pr.dynamics, pr.x0, us, pr.theta_dyn)
        J = total_cost(pr, traj)
        if not np.isfinite(J):
            raise DivergenceError("non-finite cost at the initial guess")
        self.history = [J]
        mu = self.mu_init
        lin = self._linearize(traj)
        for it in range(self.max_iter):
            self.iterations = it
            if lin.stationarity <= self.tol:
                return traj
            second_order = lin.stationarity < self.second_order_below
            accepted = False
            for order in ((True, False) if second_order else (False,)):
                bw = self._backward(traj, lin, mu, order)
                if bw is None:
                    continue
                ks, Ks, dJ1, dJ2 = bw
                alpha = 1.0
                for _ in range(self.backtracks + 1):
                    try:
                        cand = self._forward(traj, ks, Ks, alpha)
                        Jc = total_cost(pr, cand)
                    except DivergenceError:
                        Jc = np.inf
                    expected = -(alpha * dJ1 + alpha**2 * dJ2)
                    # Near the optimum the predicted decrease falls below round-off; accept ties then.
                    slack = 1e-13 * max(1.0, abs(J)) if expected < 1e-11 * max(1.0, abs(J)) else 0.0
                    if np.isfinite(Jc) and Jc < J + slack:
                        accepted = True
                        break
                    alpha *= 0.5
                if accepted:
                    break
            if not accepted:
                mu *= 10.0
                if mu > self.mu_max:
                    break
                continue
            improvement = J - Jc
            traj, J = cand, min(Jc, J)
            self.history.append(J)
            mu = max(self.mu_init, mu / 2.0)
            lin = self._linearize(traj)
            if improvement < self.min_improvement and lin.stationarity <= self.tol:
                return traj
        self.iterations = self.max_iter
        if lin.stationarity <= self.tol:
            return traj
        raise SolverFailure(f"iLQR stopped with stationarity {lin.stationarity:.3e} > {self.tol:.1e}",
                            best=traj, residual=lin.stationarity)


def solve_ocp(problem: OCProblem, warm_start: Trajectory | None = None, tol: float = 1e-6,
              max_iter: int = 200) -> Trajectory:
    """Locally optimal trajectory of ``problem`` with stationarity residual <= ``tol``."""
    return IlqrSolver(problem, tol=tol, max_iter=max_iter).solve(warm_start)
