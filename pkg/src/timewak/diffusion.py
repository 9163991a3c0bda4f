"""Noise estimators and deterministic samplers.

Arrays are ``(B, W, F)`` float64.  Step ``t`` runs from ``T`` (noise) down to 0
(data); the schedule supplies the DDIM coefficients ``a_t``/``b_t``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .core import InvalidRangeError, NoiseSchedule, TimeWakError, as_series

__all__ = [
    "NoiseEstimator",
    "FunctionEstimator",
    "AnalyticGaussianEstimator",
    "LoadedLinearEstimator",
    "SingularOperatorError",
    "Trajectory",
    "ddim_step",
    "ddim_invert_step",
    "ddim_sample",
    "ddim_invert",
    "bdia_sample",
    "bdia_invert",
    "q_sample",
]


class SingularOperatorError(TimeWakError):
    pass


class NoiseEstimator(Protocol):
    def estimate(self, x: np.ndarray, t: int) -> np.ndarray: ...


class FunctionEstimator:
    """Wrap a plain ``fn(x, t)`` as an estimator."""

    def __init__(self, fn: Callable[[np.ndarray, int], np.ndarray]):
        self.fn = fn

    def estimate(self, x, t):
        return np.asarray(self.fn(x, t), dtype=np.float64)


class AnalyticGaussianEstimator:
    """Bayes-optimal noise predictor for data ``x0 ~ N(mean, cov)``.

    With ``cov = V diag(lam) V^T`` the optimal prediction at step ``t`` is

        eps_hat = sqrt(1 - ab) * V diag(1 / (ab*lam + 1 - ab)) V^T (x_t - sqrt(ab) * mean)

    which is what ``(x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)`` reduces to.
    A single eigendecomposition serves every step.
    """

    def __init__(self, mean, cov, schedule: NoiseSchedule, window: int, features: int):
        d = window * features
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        if mean.shape != (d,) or cov.shape != (d, d):
            raise InvalidRangeError(f"mean/cov must be ({d},)/({d},{d}) for window={window}, features={features}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise InvalidRangeError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        lam, vecs = np.linalg.eigh(cov)
        if lam.min() <= 1e-9:
            raise InvalidRangeError(f"covariance must be positive definite (min eigenvalue {lam.min():.3g})")
        self.mean = mean
        self.cov = cov
        self.schedule = schedule
        self.window = window
        self.features = features
        self.eigvals = lam
        self.eigvecs = vecs
        self._vt_mean = vecs.T @ mean
        ab = schedule.alpha_bar[:, None]
        denom = ab * lam[None, :] + (1.0 - ab)
        self._gain = np.zeros_like(denom)
        with np.errstate(divide="ignore"):
            self._gain[1:] = np.sqrt(1.0 - ab[1:]) / denom[1:]
        self._min_denom = denom[1:].min(axis=1)

    @classmethod
    def fit(cls, windows: np.ndarray, schedule: NoiseSchedule, ridge: float = 1e-6) -> "AnalyticGaussianEstimator":
        """Moment-match a Gaussian to a ``(B, W, F)`` stack of windows."""
        x = as_series(windows, name="windows")
        _, W, F = x.shape
        flat = x.reshape(len(x), -1)
        mean = flat.mean(axis=0)
        cov = np.cov(flat, rowvar=False, bias=False) if len(flat) > 1 else np.zeros((W * F, W * F))
        cov = np.atleast_2d(cov) + ridge * np.eye(W * F)
        return cls(mean, cov, schedule, W, F)

    def _check(self, t: int):
        if not 1 <= t <= self.schedule.T:
            raise InvalidRangeError(f"step t must lie in [1, {self.schedule.T}], got {t}")
        if self._min_denom[t - 1] <= 1e-12:
            raise SingularOperatorError(f"posterior operator singular at step {t}")

    def estimate(self, x, t):
        self._check(t)
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        sab = math.sqrt(self.schedule.alpha_bar[t])
        z = flat @ self.eigvecs - sab * self._vt_mean
        return ((z * self._gain[t]) @ self.eigvecs.T).reshape(shape)

    def jacobian(self, t: int) -> np.ndarray:
        """d eps_hat / d x_t as a dense ``(d, d)`` matrix."""
        self._check(t)
        return (self.eigvecs * self._gain[t]) @ self.eigvecs.T

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, len(self.mean)))
        x = self.mean + (z * np.sqrt(self.eigvals)) @ self.eigvecs.T
        return x.reshape(n, self.window, self.features)


TWLE_MAGIC = b"TWLE"


class LoadedLinearEstimator:
    """Affine predictor ``eps_hat(x, t) = M_t x + c_t`` read from a TWLE file.

    File layout (little-endian): ``b"TWLE"``, u32 T, u32 d, then for
    ``t = 1..T`` a row-major ``d*d`` f64 matrix followed by a ``d`` f64 bias.
    """

    def __init__(self, matrices: np.ndarray, biases: np.ndarray):
        matrices = np.asarray(matrices, dtype=np.float64)
        biases = np.asarray(biases, dtype=np.float64)
        if matrices.ndim != 3 or matrices.shape[1] != matrices.shape[2] or biases.shape != matrices.shape[:2]:
            raise InvalidRangeError("expected matrices (T, d, d) and biases (T, d)")
        self.matrices = matrices
        self.biases = biases

    @property
    def steps(self) -> int:
        return len(self.matrices)

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def estimate(self, x, t):
        if not 1 <= t <= self.steps:
            raise InvalidRangeError(f"step t must lie in [1, {self.steps}], got {t}")
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.dim:
            raise InvalidRangeError(f"estimator dimension {self.dim} != input dimension {flat.shape[1]}")
        return (flat @ self.matrices[t - 1].T + self.biases[t - 1]).reshape(x.shape)

    def save(self, path) -> None:
        from .io import atomic_write_bytes

        T, d = self.steps, self.dim
        parts = [TWLE_MAGIC + struct.pack("<II", T, d)]
        for t in range(T):
            parts += [self.matrices[t].astype("<f8").tobytes(), self.biases[t].astype("<f8").tobytes()]
        atomic_write_bytes(path, b"".join(parts))

    @classmethod
    def load(cls, path) -> "LoadedLinearEstimator":
        raw = Path(path).read_bytes()
        if raw[:4] != TWLE_MAGIC:
            raise TimeWakError(f"{path}: not a TWLE file")
        if len(raw) < 12:
            raise TimeWakError(f"{path}: truncated header")
        T, d = struct.unpack("<II", raw[4:12])
        need = 12 + T * (d * d + d) * 8
        if len(raw) != need:
            raise TimeWakError(f"{path}: expected {need} bytes, found {len(raw)}")
        body = np.frombuffer(raw, dtype="<f8", offset=12).reshape(T, d * d + d)
        return cls(body[:, : d * d].reshape(T, d, d).copy(), body[:, d * d:].copy())


# --------------------------------------------------------------------------- samplers


@dataclass
class Trajectory:
    """Recorded diffusion states; ``states[t]`` is ``x_t`` for ``t = 0..T``."""

    states: np.ndarray
    schedule: NoiseSchedule

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def x1(self) -> np.ndarray:
        return self.states[1]

    @property
    def xT(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.states)


def ddim_step(x_t, t: int, est: NoiseEstimator, sched: NoiseSchedule) -> np.ndarray:
    if t < 1:
        raise InvalidRangeError("ddim_step needs t >= 1")
    return sched.ddim_a[t] * x_t + sched.ddim_b[t] * est.estimate(x_t, t)


def ddim_invert_step(x_t, t: int, est: NoiseEstimator, sched: NoiseSchedule) -> np.ndarray:
    """Approximate ``x_{t+1}`` from ``x_t`` reusing ``eps_hat(x_t, t+1)``."""
    if t > sched.T - 1:
        raise InvalidRangeError(f"ddim_invert_step needs t <= T-1 = {sched.T - 1}")
    a, b = sched.ddim_a[t + 1], sched.ddim_b[t + 1]
    return (x_t - b * est.estimate(x_t, t + 1)) / a


def ddim_sample(x_T, est, sched, start: int | None = None) -> np.ndarray:
    """Plain DDIM from step ``start`` (default ``T``) down to 0."""
    x = as_series(x_T)
    for t in range(sched.T if start is None else start, 0, -1):
        x = ddim_step(x, t, est, sched)
    return x


def ddim_invert(x0, est, sched, stop: int | None = None) -> np.ndarray:
    x = as_series(x0)
    for t in range(0, sched.T if stop is None else stop):
        x = ddim_invert_step(x, t, est, sched)
    return x


def bdia_sample(x_T, est: NoiseEstimator, sched: NoiseSchedule) -> Trajectory:
    """BDIA-DDIM sampling.  The first step is a plain DDIM step since no
    ``x_{T+1}`` exists; every later step mixes ``x_{t+1}`` and ``x_t``."""
    x_T = as_series(x_T, name="x_T")
    T, g = sched.T, sched.gamma
    a, b = sched.ddim_a, sched.ddim_b
    states = np.empty((T + 1,) + x_T.shape)
    states[T] = x_T
    states[T - 1] = ddim_step(x_T, T, est, sched)
    for t in range(T - 1, 0, -1):
        x_next, x_t = states[t + 1], states[t]
        eps = est.estimate(x_t, t)
        backward = x_t / a[t + 1] - (b[t + 1] / a[t + 1]) * eps
        forward = a[t] * x_t + b[t] * eps
        states[t - 1] = g * (x_next - x_t) - g * (backward - x_t) + forward
    return Trajectory(states, sched)


def bdia_invert(x0, x1, est: NoiseEstimator, sched: NoiseSchedule) -> Trajectory:
    """Run the BDIA recurrence backwards from ``(x0, x1)`` to ``x_T``.

    The map is an exact algebraic inverse of :func:`bdia_sample`.  When ``x1``
    is ``None`` it is replaced by ``x0``, which is the only approximation.
    """
    x0 = as_series(x0, name="x0")
    x1 = x0.copy() if x1 is None else as_series(x1, name="x1")
    if x1.shape != x0.shape:
        raise InvalidRangeError("x0 and x1 must have the same shape")
    T, g = sched.T, sched.gamma
    a, b = sched.ddim_a, sched.ddim_b
    states = np.empty((T + 1,) + x0.shape)
    states[0], states[1] = x0, x1
    for t in range(1, T):
        x_prev, x_t = states[t - 1], states[t]
        eps = est.estimate(x_t, t)
        forward = a[t] * x_t + b[t] * eps
        backward = x_t / a[t + 1] - (b[t + 1] / a[t + 1]) * eps
        states[t + 1] = x_prev / g - forward / g + backward
    return Trajectory(states, sched)


def q_sample(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise InvalidRangeError("noise must match x0 in shape")
    if not 0 <= t <= sched.T:
        raise InvalidRangeError(f"t must lie in [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise
