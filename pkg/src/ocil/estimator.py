"""EKF parameter estimator over a static parameter state, plus its Lyapunov diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pdp import ConditioningError, TrajectoryGradient
from .ocp import Trajectory

R_FLOOR = 1e-12


@dataclass
class EstimatorState:
    theta: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if self.P.shape != (self.theta.size, self.theta.size):
            raise ValueError(f"P has shape {self.P.shape}, expected {(self.theta.size,) * 2}")

    @classmethod
    def initial(cls, theta0, p0: float = 10.0) -> "EstimatorState":
        theta0 = np.asarray(theta0, dtype=float).ravel()
        return cls(theta0.copy(), p0 * np.eye(theta0.size))

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.theta.copy(), self.P.copy())


def ekf_predict(state: EstimatorState, q: float = 0.0) -> EstimatorState:
    """Identity prediction; ``q > 0`` inflates the covariance by ``q I``."""
    if q < 0:
        raise ValueError("q must be >= 0")
    P = state.P + q * np.eye(state.P.shape[0]) if q else state.P.copy()
    return EstimatorState(state.theta.copy(), P)


def rt_sizing(L, P, scale: float = 10.0, sigma: float = 0.0) -> np.ndarray:
    """``R = scale * tr(L P L') / r * I``, floored at ``sigma^2 I``."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    r = L.shape[0]
    level = scale * float(np.trace(L @ P @ L.T)) / r
    return max(level, sigma**2, R_FLOOR) * np.eye(r)


@dataclass
class NoiseModel:
    """Measurement noise: injected ``sigma`` and either a fixed ``R`` or the sized default."""

    sigma: float = 0.0
    R: np.ndarray | None = None
    scale: float = 10.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.R is not None:
            self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
            if np.linalg.eigvalsh(0.5 * (self.R + self.R.T))[0] <= 0:
                raise ValueError("R must be positive-definite")

    def covariance(self, L, P) -> np.ndarray:
        if self.R is not None:
            return self.R
        return rt_sizing(L, P, self.scale, self.sigma)


def ekf_update(prior: EstimatorState, L, residual, noise) -> EstimatorState:
    """Kalman correction for the residual ``l = O - h(theta)`` with ``L = dl/dtheta``.

    Since ``dh/dtheta = -L``, the estimate moves along ``-K l``:
    ``K = P L' (L P L' + R)^-1``, ``P <- (I - K L) P``, ``theta <- theta - K l``.
    ``noise`` is a :class:`NoiseModel` or an explicit ``R`` matrix.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    l = np.atleast_1d(np.asarray(residual, dtype=float))
    P = prior.P
    R = noise.covariance(L, P) if isinstance(noise, NoiseModel) else np.atleast_2d(np.asarray(noise, dtype=float))
    if L.shape != (l.size, P.shape[0]) or R.shape != (l.size, l.size):
        raise ValueError("inconsistent shapes in ekf_update")
    if not np.all(np.isfinite(L)):
        raise ConditioningError("residual Jacobian is not finite")
    PLt = P @ L.T
    S = L @ PLt + R
    S = 0.5 * (S + S.T)
    try:
        K = np.linalg.solve(S, PLt.T).T
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("innovation matrix is singular") from exc
    P_new = P - K @ (L @ P)
    P_new = 0.5 * (P_new + P_new.T)
    return EstimatorState(prior.theta - K @ l, P_new)


def lyapunov_value(truth, state: EstimatorState) -> float:
    """``(theta* - theta)' P^-1 (theta* - theta)``."""
    e = np.asarray(truth, dtype=float) - state.theta
    return float(e @ np.linalg.solve(state.P, e))


@dataclass
class ResidualSpec:
    """Signed residual ``l(xi_t, O_t)`` and its partial ``dl/d(x_t, u_t)``.

    ``kind="state"`` gives ``O_t - x_t``; ``kind="full"`` gives ``O_t - [x_t; u_t]``
    where the input block is zero at the final index (no ``u_T`` exists).
    """

    n: int
    m: int
    kind: str = "state"

    def __post_init__(self):
        if self.kind not in ("state", "full"):
            raise ValueError(f"unknown residual kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.n if self.kind == "state" else self.n + self.m

    def measure(self, traj: Trajectory, t: int) -> np.ndarray:
        if self.kind == "state":
            return traj.xs[t].copy()
        u = traj.us[t] if t < traj.horizon else np.zeros(self.m)
        return np.concatenate([traj.xs[t], u])

    def measure_all(self, traj: Trajectory) -> np.ndarray:
        return np.stack([self.measure(traj, t) for t in range(traj.horizon + 1)])

    def residual(self, traj: Trajectory, t: int, obs) -> np.ndarray:
        l = np.asarray(obs, dtype=float) - self.measure(traj, t)
        if self.kind == "full" and t == traj.horizon:
            l[self.n:] = 0.0
        return l

    def partial(self, t: int, horizon: int) -> np.ndarray:
        n, m = self.n, self.m
        D = np.zeros((self.dim, n + m))
        D[:n, :n] = -np.eye(n)
        if self.kind == "full" and t < horizon:
            D[n:, n:] = -np.eye(m)
        return D


def assemble_residual_jacobian(spec: ResidualSpec, grad: TrajectoryGradient, t: int) -> np.ndarray:
    """``L_t = dl/dxi_t @ col{X_t, U_t}`` (``U_T`` is taken as zero)."""
    if not 0 <= t <= grad.horizon:
        raise ValueError(f"step {t} outside the gradient horizon {grad.horizon}")
    X = grad.X[t]
    if X.shape[0] != spec.n or grad.U.shape[1] != spec.m:
        raise ValueError("gradient dimensions do not match the residual spec")
    U = grad.U[t] if t < grad.horizon else np.zeros((spec.m, X.shape[1]))
    return spec.partial(t, grad.horizon) @ np.vstack([X, U])
