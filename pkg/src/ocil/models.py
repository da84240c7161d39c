"""Benchmark dynamics (cartpole, quadrotor, rocket), Euler discretization and neural models.

Every discrete model exposes the same derivative surface used by the solver and
the gradient generator:

* ``step(x, u, theta)`` -> next state
* ``jacobians(x, u, theta)`` -> ``(F, G, E)`` = (df/dx, df/du, df/dtheta)
* ``hessians(x, u, theta, lam)`` -> second derivatives of ``lam . f``
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import sympy as sp

from .diffcore import MlpParams, ShapeError, mlp_forward, mlp_jacobians

QUAT_TOL = 1e-3
DEFAULT_GRAVITY = 10.0


class StateIntegrityError(ValueError):
    """Quaternion part of a state is too far from unit norm."""


class HessBlocks(NamedTuple):
    """Second derivatives of a scalar contraction ``w . f(x, u, theta)``."""

    xx: np.ndarray
    xu: np.ndarray
    uu: np.ndarray
    xt: np.ndarray
    ut: np.ndarray


def _split_hessian(H: np.ndarray, n: int, m: int) -> HessBlocks:
    H = 0.5 * (H + H.T)
    return HessBlocks(H[:n, :n], H[:n, n:n + m], H[n:n + m, n:n + m], H[:n, n + m:], H[n:n + m, n + m:])


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------


def _check_inertia(J) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.shape != (3, 3) or not np.allclose(J, J.T) or np.linalg.eigvalsh(J).min() <= 0:
        raise ValueError("inertia must be a symmetric positive-definite 3x3 matrix")
    return J


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5
    gravity: float = DEFAULT_GRAVITY

    def __post_init__(self):
        if min(self.cart_mass, self.pole_mass, self.pole_length) <= 0:
            raise ValueError("masses and pole length must be positive")

    @property
    def total_mass(self) -> float:
        return self.cart_mass + self.pole_mass

    def theta(self) -> np.ndarray:
        return np.array([self.cart_mass, self.pole_mass, self.pole_length])


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 1.0
    wing_length: float = 0.4
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.02, 0.04]))
    torque_coeff: float = 0.01
    gravity: float = DEFAULT_GRAVITY

    def __post_init__(self):
        object.__setattr__(self, "inertia", _check_inertia(self.inertia))
        if min(self.mass, self.wing_length, self.torque_coeff) <= 0:
            raise ValueError("mass, wing length and torque coefficient must be positive")

    def theta(self) -> np.ndarray:
        return np.concatenate([[self.mass, self.wing_length], np.diag(self.inertia)])


@dataclass(frozen=True)
class RocketParams:
    mass: float = 10.0
    length: float = 2.0
    inertia: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 0.5]))
    gravity: float = DEFAULT_GRAVITY

    def __post_init__(self):
        object.__setattr__(self, "inertia", _check_inertia(self.inertia))
        if self.mass <= 0 or self.length <= 0:
            raise ValueError("mass and length must be positive")

    def theta(self) -> np.ndarray:
        return np.concatenate([[self.mass, self.length], np.diag(self.inertia)])


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------


def omega_matrix(w):
    """4x4 matrix with ``q_dot = 0.5 * omega_matrix(w) @ q`` (scalar-first quaternion)."""
    wx, wy, wz = w[0], w[1], w[2]
    rows = [
        [0, -wx, -wy, -wz],
        [wx, 0, wz, -wy],
        [wy, -wz, 0, wx],
        [wz, wy, -wx, 0],
    ]
    if isinstance(wx, sp.Basic):
        return sp.Matrix(rows)
    return np.array(rows, dtype=float)


def dcm_body_from_inertial(q):
    """Direction cosine matrix C_{B/I}; its transpose rotates body vectors to inertial."""
    q0, q1, q2, q3 = q[0], q[1], q[2], q[3]
    rows = [
        [1 - 2 * (q2**2 + q3**2), 2 * (q1 * q2 + q0 * q3), 2 * (q1 * q3 - q0 * q2)],
        [2 * (q1 * q2 - q0 * q3), 1 - 2 * (q1**2 + q3**2), 2 * (q2 * q3 + q0 * q1)],
        [2 * (q1 * q3 + q0 * q2), 2 * (q2 * q3 - q0 * q1), 1 - 2 * (q1**2 + q2**2)],
    ]
    if isinstance(q0, sp.Basic):
        return sp.Matrix(rows)
    return np.array(rows, dtype=float)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def _normalization_derivatives(y: np.ndarray, w: np.ndarray):
    """Jacobian of ``y / |y|`` and Hessian of ``w . (y / |y|)``."""
    r = np.linalg.norm(y)
    nvec = y / r
    P = np.eye(y.size) - np.outer(nvec, nvec)
    jac = P / r
    a = w @ nvec
    hess = -(np.outer(w, nvec) + np.outer(nvec, w) + a * np.eye(y.size) - 3 * a * np.outer(nvec, nvec)) / r**2
    return jac, hess


# ---------------------------------------------------------------------------
# Continuous-time models (symbolic, lambdified)
# ---------------------------------------------------------------------------


class ContinuousModel:
    """A continuous-time vector field g(x, u, theta) with exact first and second derivatives.

    Built from a sympy expression; derivatives are differentiated symbolically
    once and compiled with ``lambdify``.
    """

    def __init__(self, name: str, x, u, theta, expr, quat_slice: slice | None = None, theta_names=()):
        self.name = name
        self.n, self.m, self.p = len(x), len(u), len(theta)
        self.quat_slice = quat_slice
        self.theta_names = tuple(theta_names)
        z = list(x) + list(u) + list(theta)
        w = sp.symbols(f"w0:{self.n}")
        expr = sp.Matrix(expr)
        jac = expr.jacobian(z)
        contraction = sum(wi * gi for wi, gi in zip(w, expr))
        hess = sp.hessian(contraction, z)
        args = (list(x), list(u), list(theta))
        self._g = sp.lambdify(args, expr, modules="numpy", cse=True)
        self._jac = sp.lambdify(args, jac, modules="numpy", cse=True)
        self._hess = sp.lambdify(args + (list(w),), hess, modules="numpy", cse=True)

    def _args(self, x, u, theta):
        x = np.asarray(x, dtype=float).reshape(self.n)
        u = np.asarray(u, dtype=float).reshape(self.m)
        theta = np.asarray(theta, dtype=float).reshape(self.p)
        return x, u, theta

    def deriv(self, x, u, theta) -> np.ndarray:
        return np.asarray(self._g(*self._args(x, u, theta)), dtype=float).reshape(self.n)

    def jacobians(self, x, u, theta):
        J = np.asarray(self._jac(*self._args(x, u, theta)), dtype=float).reshape(self.n, -1)
        n, m = self.n, self.m
        return J[:, :n], J[:, n:n + m], J[:, n + m:]

    def hessian(self, x, u, theta, w) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(self.n)
        k = self.n + self.m + self.p
        return np.asarray(self._hess(*self._args(x, u, theta), w), dtype=float).reshape(k, k)

    def hessians(self, x, u, theta, w) -> HessBlocks:
        return _split_hessian(self.hessian(x, u, theta, w), self.n, self.m)


@functools.lru_cache(maxsize=None)
def cartpole_model(gravity: float = DEFAULT_GRAVITY) -> ContinuousModel:
    """State ``[p, p_dot, angle, angle_dot]`` (angle 0 = upright), input force, theta ``[m_c, m_p, l]``."""
    x = sp.symbols("p dp a da")
    (F,) = u = sp.symbols("F0:1")
    mc, mp, l = theta = sp.symbols("mc mp l")
    _, dp, a, da = x
    mt = mc + mp
    temp = (F + mp * l * da**2 * sp.sin(a)) / mt
    dda = (gravity * sp.sin(a) - sp.cos(a) * temp) / (l * (sp.Rational(4, 3) - mp * sp.cos(a) ** 2 / mt))
    ddp = temp - mp * l * dda * sp.cos(a) / mt
    return ContinuousModel("cartpole", x, u, theta, [dp, ddp, da, dda],
                           theta_names=("cart_mass", "pole_mass", "pole_length"))


def _rigid_body_symbols():
    x = sp.symbols("px py pz vx vy vz q0 q1 q2 q3 wx wy wz")
    v = sp.Matrix(x[3:6])
    q = sp.Matrix(x[6:10])
    w = sp.Matrix(x[10:13])
    return x, v, q, w


@functools.lru_cache(maxsize=None)
def quadrotor_model(torque_coeff: float = 0.01, gravity: float = DEFAULT_GRAVITY,
                    inertia_offdiag: tuple = (0.0, 0.0, 0.0)) -> ContinuousModel:
    """13-state quadrotor, inputs = four rotor thrusts, theta ``[m, l_w, Jxx, Jyy, Jzz]``.

    Gravity is ``[0, 0, g]`` in the inertial frame and rotor thrust acts along body ``-z``.
    """
    x, v, q, w = _rigid_body_symbols()
    u = sp.symbols("T1:5")
    mass, lw, jx, jy, jz = theta = sp.symbols("m lw jx jy jz")
    jxy, jxz, jyz = inertia_offdiag
    J = sp.Matrix([[jx, jxy, jxz], [jxy, jy, jyz], [jxz, jyz, jz]])
    T1, T2, T3, T4 = u
    thrust = T1 + T2 + T3 + T4
    c = torque_coeff
    moment = sp.Matrix([lw / 2 * (T4 - T2), lw / 2 * (T3 - T1), c * (T1 - T2 + T3 - T4)])
    C_ib = dcm_body_from_inertial(q).T
    g_i = sp.Matrix([0, 0, gravity])
    dv = g_i + C_ib * sp.Matrix([0, 0, -thrust]) / mass
    dq = omega_matrix(w) * q / 2
    dw = J.LUsolve(moment - w.cross(J * w))
    expr = list(v) + list(dv) + list(dq) + list(dw)
    return ContinuousModel("quadrotor", x, u, theta, expr, quat_slice=slice(6, 10),
                           theta_names=("mass", "wing_length", "Jxx", "Jyy", "Jzz"))


@functools.lru_cache(maxsize=None)
def rocket_model(gravity: float = DEFAULT_GRAVITY,
                 inertia_offdiag: tuple = (0.0, 0.0, 0.0)) -> ContinuousModel:
    """13-state rocket, input = body-frame thrust vector, theta ``[m, L, Jxx, Jyy, Jzz]``.

    The engine sits at the tail, ``r_T = [0, 0, -L/2]`` along the body long axis
    (+z); gravity is ``[0, 0, -g]``.
    """
    x, v, q, w = _rigid_body_symbols()
    u = sp.symbols("Tx Ty Tz")
    mass, length, jx, jy, jz = theta = sp.symbols("m L jx jy jz")
    jxy, jxz, jyz = inertia_offdiag
    J = sp.Matrix([[jx, jxy, jxz], [jxy, jy, jyz], [jxz, jyz, jz]])
    T = sp.Matrix(u)
    r_t = sp.Matrix([0, 0, -length / 2])
    dv = dcm_body_from_inertial(q).T * T / mass + sp.Matrix([0, 0, -gravity])
    dq = omega_matrix(w) * q / 2
    dw = J.LUsolve(r_t.cross(T) - w.cross(J * w))
    expr = list(v) + list(dv) + list(dq) + list(dw)
    return ContinuousModel("rocket", x, u, theta, expr, quat_slice=slice(6, 10),
                           theta_names=("mass", "length", "Jxx", "Jyy", "Jzz"))


def _offdiag(J) -> tuple:
    return (float(J[0, 1]), float(J[0, 2]), float(J[1, 2]))


def _check_quat(x):
    qn = np.linalg.norm(np.asarray(x, dtype=float)[6:10])
    if abs(qn - 1.0) > QUAT_TOL:
        raise StateIntegrityError(f"quaternion norm {qn:.6f} deviates from 1 by more than {QUAT_TOL}")


def cartpole_deriv(params: CartpoleParams, x, u) -> np.ndarray:
    return cartpole_model(params.gravity).deriv(x, np.atleast_1d(u), params.theta())


def quadrotor_deriv(params: QuadrotorParams, x, u) -> np.ndarray:
    _check_quat(x)
    model = quadrotor_model(params.torque_coeff, params.gravity, _offdiag(params.inertia))
    return model.deriv(x, u, params.theta())


def rocket_deriv(params: RocketParams, x, u) -> np.ndarray:
    _check_quat(x)
    return rocket_model(params.gravity, _offdiag(params.inertia)).deriv(x, u, params.theta())


# ---------------------------------------------------------------------------
# Discrete-time models
# ---------------------------------------------------------------------------


class DiscreteDynamics:
    """Base class for ``x_{t+1} = f(x_t, u_t, theta)``."""

    n: int
    m: int
    p: int
    name: str = "dynamics"

    def step(self, x, u, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x, u, theta):
        raise NotImplementedError

    def hessians(self, x, u, theta, lam) -> HessBlocks:
        raise NotImplementedError(f"{self.name} provides no second derivatives")


class EulerDynamics(DiscreteDynamics):
    """``f = x + dt * g(x, u, theta)``, with the quaternion block renormalized after the step."""

    def __init__(self, cont: ContinuousModel, dt: float, renormalize: bool = True):
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.cont = cont
        self.dt = float(dt)
        self.n, self.m, self.p = cont.n, cont.m, cont.p
        self.name = f"{cont.name}-euler"
        self.quat_slice = cont.quat_slice if renormalize else None

    def _pre(self, x, u, theta):
        return np.asarray(x, dtype=float) + self.dt * self.cont.deriv(x, u, theta)

    def step(self, x, u, theta) -> np.ndarray:
        y = self._pre(x, u, theta)
        if self.quat_slice is not None:
            qs = self.quat_slice
            y[qs] = y[qs] / np.linalg.norm(y[qs])
        return y

    def _pre_jacobian(self, x, u, theta) -> np.ndarray:
        gx, gu, gt = self.cont.jacobians(x, u, theta)
        Jy = self.dt * np.hstack([gx, gu, gt])
        Jy[:, :self.n] += np.eye(self.n)
        return Jy

    def jacobians(self, x, u, theta):
        Jy = self._pre_jacobian(x, u, theta)
        if self.quat_slice is not None:
            qs = self.quat_slice
            y = self._pre(x, u, theta)
            jn, _ = _normalization_derivatives(y[qs], np.zeros(qs.stop - qs.start))
            Jy[qs] = jn @ Jy[qs]
        n, m = self.n, self.m
        return Jy[:, :n], Jy[:, n:n + m], Jy[:, n + m:]

    def hessians(self, x, u, theta, lam) -> HessBlocks:
        lam = np.asarray(lam, dtype=float)
        w = lam.copy()
        extra = 0.0
        if self.quat_slice is not None:
            qs = self.quat_slice
            y = self._pre(x, u, theta)
            jn, hn = _normalization_derivatives(y[qs], lam[qs])
            w[qs] = jn.T @ lam[qs]
            Jq = self._pre_jacobian(x, u, theta)[qs]
            extra = Jq.T @ hn @ Jq
        H = self.dt * self.cont.hessian(x, u, theta, w) + extra
        return _split_hessian(H, self.n, self.m)


def euler_discretize(cont: ContinuousModel, dt: float, renormalize: bool = True) -> EulerDynamics:
    return EulerDynamics(cont, dt, renormalize)


class AffineParamDynamics(DiscreteDynamics):
    """``x+ = (A0 + sum_i theta_i A_i) x + (B0 + sum_i theta_i B_i) u + D theta``.

    Linear in the state and input; bilinear in the parameters.  Used for LQ
    checks and the scalar ``x+ = theta x`` system.
    """

    def __init__(self, A0, B0, A_theta=None, B_theta=None, D=None):
        self.A0 = np.atleast_2d(np.asarray(A0, dtype=float))
        self.B0 = np.atleast_2d(np.asarray(B0, dtype=float))
        self.n, self.m = self.B0.shape
        if A_theta is None and B_theta is None and D is None:
            p = 1
        else:
            p = len(A_theta) if A_theta is not None else (len(B_theta) if B_theta is not None else np.shape(D)[1])
        self.p = p
        self.A_theta = np.zeros((p, self.n, self.n)) if A_theta is None else np.asarray(A_theta, dtype=float).reshape(p, self.n, self.n)
        self.B_theta = np.zeros((p, self.n, self.m)) if B_theta is None else np.asarray(B_theta, dtype=float).reshape(p, self.n, self.m)
        self.D = np.zeros((self.n, p)) if D is None else np.asarray(D, dtype=float).reshape(self.n, p)
        self.name = "affine"

    def matrices(self, theta):
        theta = np.asarray(theta, dtype=float)
        A = self.A0 + np.tensordot(theta, self.A_theta, axes=1)
        B = self.B0 + np.tensordot(theta, self.B_theta, axes=1)
        return A, B

    def step(self, x, u, theta):
        A, B = self.matrices(theta)
        return A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float) + self.D @ np.asarray(theta, dtype=float)

    def jacobians(self, x, u, theta):
        A, B = self.matrices(theta)
        E = np.einsum("inm,m->ni", self.A_theta, np.asarray(x, dtype=float))
        E += np.einsum("inm,m->ni", self.B_theta, np.asarray(u, dtype=float))
        return A, B, E + self.D

    def hessians(self, x, u, theta, lam):
        lam = np.asarray(lam, dtype=float)
        n, m = self.n, self.m
        xt = np.einsum("ijk,j->ki", self.A_theta, lam)
        ut = np.einsum("ijk,j->ki", self.B_theta, lam)
        return HessBlocks(np.zeros((n, n)), np.zeros((n, m)), np.zeros((m, m)), xt, ut)


class NeuralDynamics(DiscreteDynamics):
    """``x+ = MLP_theta([x; u])``; theta is the flattened network parameter vector.

    Second derivatives are forward differences of the analytic Jacobians.
    """

    def __init__(self, widths, fd_step: float = 1e-6):
        widths = tuple(int(w) for w in widths)
        if widths[-1] >= widths[0]:
            raise ShapeError("neural dynamics needs input width n + m with m >= 1")
        self.widths = widths
        self.n = widths[-1]
        self.m = widths[0] - widths[-1]
        self.p = MlpParams.zeros(widths).size
        self.fd_step = fd_step
        self.name = "neural"

    @classmethod
    def for_system(cls, n: int, m: int, **kw) -> "NeuralDynamics":
        """Default ``(n+m)-2(n+m)-n`` layout."""
        return cls((n + m, 2 * (n + m), n), **kw)

    def _params(self, theta) -> MlpParams:
        return MlpParams(self.widths, theta)

    def step(self, x, u, theta):
        return mlp_forward(self._params(theta), np.concatenate([np.ravel(x), np.ravel(u)]))

    def jacobians(self, x, u, theta):
        dz, dth = mlp_jacobians(self._params(theta), np.concatenate([np.ravel(x), np.ravel(u)]))
        return dz[:, :self.n], dz[:, self.n:], dth

    def hessians(self, x, u, theta, lam):
        lam = np.asarray(lam, dtype=float)
        params = self._params(theta)
        z = np.concatenate([np.ravel(x), np.ravel(u)])
        k = z.size
        base = np.hstack(mlp_jacobians(params, z))
        base = lam @ base
        rows = np.empty((k, k + self.p))
        for i in range(k):
            zp = z.copy()
            zp[i] += self.fd_step
            rows[i] = (lam @ np.hstack(mlp_jacobians(params, zp)) - base) / self.fd_step
        zz = 0.5 * (rows[:, :k] + rows[:, :k].T)
        n = self.n
        return HessBlocks(zz[:n, :n], zz[:n, n:], zz[n:, n:], rows[:n, k:], rows[n:, k:])


def neural_dynamics(mlp: MlpParams) -> NeuralDynamics:
    return NeuralDynamics(mlp.widths)


class NeuralPolicy:
    """State-feedback policy ``u = mu(x, theta)`` given by a tanh MLP."""

    def __init__(self, widths):
        self.widths = tuple(int(w) for w in widths)
        self.n = self.widths[0]
        self.m = self.widths[-1]
        self.p = MlpParams.zeros(self.widths).size

    @classmethod
    def for_system(cls, n: int, m: int, layout: str = "n-3n-m") -> "NeuralPolicy":
        if layout == "n-3n-m":
            return cls((n, 3 * n, m))
        if layout == "n-3n-3n-m":
            return cls((n, 3 * n, 3 * n, m))
        raise ValueError(f"unknown policy layout {layout!r}")

    def __call__(self, x, theta) -> np.ndarray:
        return mlp_forward(MlpParams(self.widths, theta), x)

    def jacobians(self, x, theta):
        return mlp_jacobians(MlpParams(self.widths, theta), x)


def neural_policy(mlp: MlpParams, x):
    """Evaluate a policy network: returns ``(u, du/dx, du/dtheta)``."""
    dx, dth = mlp_jacobians(mlp, x)
    return mlp_forward(mlp, x), dx, dth


# ---------------------------------------------------------------------------
# Environment registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Environment:
    name: str
    dynamics: EulerDynamics
    theta_star: np.ndarray
    goal: np.ndarray
    hover_input: np.ndarray
    excitation_amplitude: float


_DEFAULT_DT = {"cartpole": 0.05, "quadrotor": 0.1, "rocket": 0.1}


def make_environment(name: str, dt: float | None = None, params=None) -> Environment:
    """Build a discretized benchmark together with its ground-truth parameters."""
    dt = _DEFAULT_DT[name] if dt is None else dt
    if name == "cartpole":
        params = params or CartpoleParams()
        dyn = euler_discretize(cartpole_model(params.gravity), dt)
        return Environment(name, dyn, params.theta(), np.zeros(4), np.zeros(1), 1.0)
    if name == "quadrotor":
        params = params or QuadrotorParams()
        dyn = euler_discretize(quadrotor_model(params.torque_coeff, params.gravity, _offdiag(params.inertia)), dt)
        goal = np.zeros(13)
        goal[6] = 1.0
        hover = np.full(4, params.mass * params.gravity / 4)
        return Environment(name, dyn, params.theta(), goal, hover, 1.0)
    if name == "rocket":
        params = params or RocketParams()
        dyn = euler_discretize(rocket_model(params.gravity, _offdiag(params.inertia)), dt)
        goal = np.zeros(13)
        goal[6] = 1.0
        hover = np.array([0.0, 0.0, params.mass * params.gravity])
        return Environment(name, dyn, params.theta(), goal, hover, 5.0)
    raise ValueError(f"unknown environment {name!r}")
