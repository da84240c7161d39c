"""Finite-difference oracles and a small tanh MLP with analytic Jacobians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_FD_STEP = 1e-6


class NumericalEvaluationError(RuntimeError):
    """A probed function returned a non-finite value."""


class ShapeError(ValueError):
    pass


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], point, step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``fun`` at ``point``.

    Entry ``(i, j)`` is ``(fun(p + h e_j)_i - fun(p - h e_j)_i) / (2 h)``.
    Scalar functions and scalar points are promoted to 1-vectors.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    point = np.atleast_1d(np.asarray(point, dtype=float))
    cols = []
    for j in range(point.size):
        e = np.zeros_like(point)
        e[j] = step
        plus = np.atleast_1d(np.asarray(fun(point + e), dtype=float))
        minus = np.atleast_1d(np.asarray(fun(point - e), dtype=float))
        for probe, val in ((point + e, plus), (point - e, minus)):
            if not np.all(np.isfinite(val)):
                raise NumericalEvaluationError(
                    f"non-finite output at probe index {j} (point={probe.tolist()})"
                )
        cols.append((plus - minus) / (2.0 * step))
    return np.stack(cols, axis=-1)


def fd_hessian(fun: Callable[[np.ndarray], float], point, step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function (used only by tests and checks)."""
    point = np.atleast_1d(np.asarray(point, dtype=float))

    def grad(p):
        return fd_jacobian(lambda q: np.atleast_1d(fun(q)), p, step).ravel()

    H = fd_jacobian(grad, point, step)
    return 0.5 * (H + H.T)


def relative_error(a, b) -> float:
    """Frobenius ``||a - b|| / max(||b||, 1e-12)``; absolute when ``b`` is (near) zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(b), 1e-12)
    if np.linalg.norm(b) < 1e-8:
        denom = 1.0
    return float(np.linalg.norm(a - b) / denom)


@dataclass(frozen=True)
class MlpParams:
    """Layer widths plus a flat parameter vector.

    Flattening order per layer: weight matrix (out x in) row-major, then bias.
    """

    widths: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ShapeError(f"invalid layer widths {self.widths}")
        flat = np.asarray(self.flat, dtype=float).ravel()
        if flat.size != mlp_param_count(widths):
            raise ShapeError(f"expected {mlp_param_count(widths)} parameters, got {flat.size}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "MlpParams":
        widths = [np.asarray(layers[0][0]).shape[1]]
        chunks = []
        for W, b in layers:
            W = np.atleast_2d(np.asarray(W, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if W.shape[1] != widths[-1] or b.shape != (W.shape[0],):
                raise ShapeError("inconsistent layer shapes")
            widths.append(W.shape[0])
            chunks += [W.ravel(), b]
        return cls(tuple(widths), np.concatenate(chunks))

    @classmethod
    def zeros(cls, widths) -> "MlpParams":
        return cls(tuple(widths), np.zeros(mlp_param_count(widths)))

    @classmethod
    def random(cls, widths, rng: np.random.Generator, scale: float = 0.1) -> "MlpParams":
        """Uniform on ``[-scale, scale]``."""
        n = mlp_param_count(widths)
        return cls(tuple(widths), rng.uniform(-scale, scale, size=n))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.widths, self.flat)

    def with_flat(self, flat) -> "MlpParams":
        return MlpParams(self.widths, flat)

    @property
    def size(self) -> int:
        return self.flat.size


def mlp_param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def unflatten(widths, flat) -> list[tuple[np.ndarray, np.ndarray]]:
    flat = np.asarray(flat, dtype=float)
    layers = []
    k = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = flat[k:k + fan_in * fan_out].reshape(fan_out, fan_in)
        k += fan_in * fan_out
        b = flat[k:k + fan_out]
        k += fan_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def _check_input(params: MlpParams, z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (params.widths[0],):
        raise ShapeError(f"input has shape {z.shape}, expected ({params.widths[0]},)")
    return z


def mlp_forward(params: MlpParams, z) -> np.ndarray:
    """tanh hidden layers, affine output layer."""
    a = _check_input(params, z)
    layers = params.layers()
    for W, b in layers[:-1]:
        a = np.tanh(W @ a + b)
    W, b = layers[-1]
    return W @ a + b


def mlp_jacobians(params: MlpParams, z) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d out / d input, d out / d flat params)`` by the layer-wise chain rule."""
    a = _check_input(params, z)
    layers = params.layers()
    acts = [a]
    for W, b in layers[:-1]:
        a = np.tanh(W @ a + b)
        acts.append(a)
    n_out = params.widths[-1]

    # Backward sweep: S = d out / d (pre-activation of layer k), starting at the output layer.
    d_params = []
    S = np.eye(n_out)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a_in = acts[k]
        # d out / d W[i, j] = S[:, i] * a_in[j]; row-major flattening of W.
        dW = (S[:, :, None] * a_in[None, None, :]).reshape(n_out, -1)
        d_params.append(np.hstack([dW, S]))
        S = S @ W
        if k > 0:
            S = S * (1.0 - acts[k] ** 2)[None, :]
    d_params.reverse()
    return S, np.hstack(d_params)
