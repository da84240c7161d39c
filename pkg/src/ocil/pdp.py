"""Trajectory sensitivities dxi/dtheta via the auxiliary LQR recursion.

Three variants are provided: through an optimal control problem
(``trajectory_gradient``), through an open-loop rollout and through a
closed-loop policy rollout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .models import DiscreteDynamics, NeuralPolicy
from .ocp import CostateTrajectory, OCProblem, Trajectory, compute_costates

log = logging.getLogger(__name__)

HUU_FLOOR = 1e-8


class ConditioningError(np.linalg.LinAlgError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CapabilityError(NotImplementedError):
    """The dynamics model does not expose the second derivatives PDP needs."""


@dataclass
class HamiltonianDerivs:
    """Second derivatives of ``H_t = c_t + f_t' lam_{t+1}`` and the dynamics Jacobians.

    Arrays are stacked over ``t = 0..T-1``; the ``*_T`` fields belong to the terminal cost.
    """

    F: np.ndarray     # (T, n, n)
    G: np.ndarray     # (T, n, m)
    E: np.ndarray     # (T, n, p)
    Hxx: np.ndarray   # (T, n, n)
    Hxu: np.ndarray   # (T, n, m)
    Huu: np.ndarray   # (T, m, m)
    Hxt: np.ndarray   # (T, n, p)
    Hut: np.ndarray   # (T, m, p)
    Hxx_T: np.ndarray  # (n, n)
    Hxt_T: np.ndarray  # (n, p)

    @property
    def horizon(self) -> int:
        return self.F.shape[0]


def _regularize_huu(Huu: np.ndarray, t: int) -> np.ndarray:
    Huu = 0.5 * (Huu + Huu.T)
    lo = float(np.linalg.eigvalsh(Huu)[0]) if Huu.size else 1.0
    if lo < HUU_FLOOR:
        log.debug("H_uu at step %d has min eigenvalue %.3e; shifting to %.0e", t, lo, HUU_FLOOR)
        Huu = Huu + (HUU_FLOOR - lo) * np.eye(Huu.shape[0])
    return Huu


def hamiltonian_derivatives(problem: OCProblem, traj: Trajectory,
                            costates: CostateTrajectory | None = None) -> HamiltonianDerivs:
    if costates is None:
        costates = compute_costates(problem, traj)
    dyn, cost = problem.dynamics, problem.cost
    T, n, m, p, pd = problem.horizon, problem.n, problem.m, problem.p, dyn.p
    td, tc = problem.theta_dyn, problem.theta_cost
    out = {k: np.zeros(s) for k, s in dict(F=(T, n, n), G=(T, n, m), E=(T, n, p), Hxx=(T, n, n), Hxu=(T, n, m),
                                           Huu=(T, m, m), Hxt=(T, n, p), Hut=(T, m, p)).items()}
    for t in range(T):
        x, u, lam = traj.xs[t], traj.us[t], costates.lams[t + 1]
        F, G, E = dyn.jacobians(x, u, td)
        c = cost.stage_derivs(x, u, tc)
        try:
            hb = dyn.hessians(x, u, td, lam)
        except NotImplementedError as exc:
            raise CapabilityError(f"{type(dyn).__name__} does not provide second derivatives") from exc
        out["F"][t], out["G"][t], out["E"][t, :, :pd] = F, G, E
        out["Hxx"][t] = c.cxx + hb.xx
        out["Hxu"][t] = c.cxu + hb.xu
        out["Huu"][t] = c.cuu + hb.uu
        out["Hxt"][t, :, :pd], out["Hxt"][t, :, pd:] = hb.xt, c.cxt
        out["Hut"][t, :, :pd], out["Hut"][t, :, pd:] = hb.ut, c.cut
    term = cost.terminal_derivs(traj.xs[T], tc)
    Hxt_T = np.zeros((n, p))
    Hxt_T[:, pd:] = term.hxt
    return HamiltonianDerivs(**out, Hxx_T=term.hxx, Hxt_T=Hxt_T)


@dataclass
class ValueRecursion:
    """Matrices ``V_t`` (T+1, n, n) and ``W_t`` (T+1, n, p) plus the per-step auxiliary system."""

    V: np.ndarray
    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    Huu: np.ndarray


@dataclass
class TrajectoryGradient:
    """``X[t] = dx_t/dtheta`` (T+1, n, p) and ``U[t] = du_t/dtheta`` (T, m, p)."""

    X: np.ndarray
    U: np.ndarray

    @property
    def horizon(self) -> int:
        return self.U.shape[0]

    def stacked(self) -> np.ndarray:
        """d col{x_0..x_T, u_0..u_{T-1}} / dtheta, matching ``Trajectory.stacked``."""
        p = self.X.shape[2]
        return np.vstack([self.X.reshape(-1, p), self.U.reshape(-1, p)])


def _solve(S, rhs, t):
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"I + V B is singular at step {t}", t) from exc


def backward_pass(d: HamiltonianDerivs) -> ValueRecursion:
    T, n = d.horizon, d.F.shape[1]
    p = d.E.shape[2]
    m = d.G.shape[2]
    V = np.empty((T + 1, n, n)); W = np.empty((T + 1, n, p))
    A = np.empty((T, n, n)); B = np.empty((T, n, n)); M = np.empty((T, n, p))
    Huu_all = np.empty((T, m, m))
    V[T], W[T] = d.Hxx_T, d.Hxt_T
    I = np.eye(n)
    for t in range(T - 1, -1, -1):
        Huu = _regularize_huu(d.Huu[t], t)
        Huu_all[t] = Huu
        Hux = d.Hxu[t].T
        sol = np.linalg.solve(Huu, np.hstack([Hux, d.Hut[t], d.G[t].T]))
        iHux, iHut, iGt = sol[:, :n], sol[:, n:n + p], sol[:, n + p:]
        A[t] = d.F[t] - d.G[t] @ iHux
        B[t] = d.G[t] @ iGt
        M[t] = d.E[t] - d.G[t] @ iHut
        C = d.Hxx[t] - d.Hxu[t] @ iHux
        N = d.Hxt[t] - d.Hxu[t] @ iHut
        S = I + V[t + 1] @ B[t]
        rhs = _solve(S, np.hstack([V[t + 1] @ A[t], W[t + 1] + V[t + 1] @ M[t]]), t)
        Vt = C + A[t].T @ rhs[:, :n]
        V[t] = 0.5 * (Vt + Vt.T)
        W[t] = A[t].T @ rhs[:, n:] + N
    return ValueRecursion(V, W, A, B, M, Huu_all)


def forward_pass(d: HamiltonianDerivs, vr: ValueRecursion) -> TrajectoryGradient:
    T, n = d.horizon, d.F.shape[1]
    p, m = d.E.shape[2], d.G.shape[2]
    X = np.zeros((T + 1, n, p)); U = np.empty((T, m, p))
    I = np.eye(n)
    for t in range(T):
        Vn = vr.V[t + 1]
        S = I + Vn @ vr.B[t]
        inner = _solve(S, Vn @ vr.A[t] @ X[t] + Vn @ vr.M[t] + vr.W[t + 1], t)
        U[t] = -np.linalg.solve(vr.Huu[t], d.Hxu[t].T @ X[t] + d.Hut[t] + d.G[t].T @ inner)
        X[t + 1] = d.F[t] @ X[t] + d.G[t] @ U[t] + d.E[t]
    return TrajectoryGradient(X, U)


def trajectory_gradient(problem: OCProblem, traj: Trajectory,
                        costates: CostateTrajectory | None = None) -> TrajectoryGradient:
    """d xi*/d theta for an optimal trajectory ``traj`` of ``problem``."""
    d = hamiltonian_derivatives(problem, traj, costates)
    return forward_pass(d, backward_pass(d))


def open_loop_gradient(dyn: DiscreteDynamics, traj: Trajectory, theta) -> TrajectoryGradient:
    """``X_{t+1} = F_t X_t + E_t`` with the inputs held fixed."""
    T, n, m = traj.horizon, dyn.n, dyn.m
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    X = np.zeros((T + 1, n, p))
    for t in range(T):
        F, _, E = dyn.jacobians(traj.xs[t], traj.us[t], theta)
        X[t + 1] = F @ X[t] + E
    return TrajectoryGradient(X, np.zeros((T, m, p)))


def closed_loop_gradient(dyn: DiscreteDynamics, policy: NeuralPolicy, traj: Trajectory, theta,
                         dyn_theta=()) -> TrajectoryGradient:
    """Sensitivity of a policy rollout w.r.t. the policy parameters."""
    T, n, m = traj.horizon, dyn.n, dyn.m
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    X = np.zeros((T + 1, n, p)); U = np.empty((T, m, p))
    for t in range(T):
        Ux, Ut = policy.jacobians(traj.xs[t], theta)
        U[t] = Ux @ X[t] + Ut
        F, G, _ = dyn.jacobians(traj.xs[t], traj.us[t], dyn_theta)
        X[t + 1] = F @ X[t] + G @ U[t]
    return TrajectoryGradient(X, U)
