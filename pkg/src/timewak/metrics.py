"""Training-free quality metrics and inversion diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import InvalidRangeError, TimeWakError, as_series
from .diffusion import Trajectory

__all__ = [
    "DegenerateFeatureError",
    "QualityReport",
    "covariance",
    "correlational_score",
    "aggregate_inversion_error",
    "x1_x0_distance",
    "tsg_metrics",
    "quality_report",
]

HIST_BINS = 50
ACF_LAGS = 5


class DegenerateFeatureError(TimeWakError):
    pass


@dataclass
class QualityReport:
    correlational: float
    mdd: float
    acd: float
    sd: float
    kd: float

    def to_dict(self) -> dict:
        return asdict(self)


def covariance(x, i: int, j: int) -> float:
    """Population covariance of features ``i`` and ``j`` of one ``(W, F)`` series."""
    x = np.asarray(x, dtype=np.float64)
    ki, kj = x[:, i], x[:, j]
    return float(np.mean(ki * kj) - ki.mean() * kj.mean())


def _batch_cov(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=1, keepdims=True)
    return np.einsum("bwi,bwj->ij", centered, centered) / (x.shape[0] * x.shape[1])


def _corr(x: np.ndarray, name: str) -> np.ndarray:
    cov = _batch_cov(x)
    d = np.diag(cov)
    if np.any(d <= 0):
        raise DegenerateFeatureError(f"{name}: feature(s) {np.flatnonzero(d <= 0).tolist()} have zero variance")
    return cov / np.sqrt(np.outer(d, d))


def correlational_score(real, synth) -> float:
    """``0.1 * sum_ij |rho_real - rho_synth|`` over all ordered feature pairs.

    Per-window covariances are averaged over each batch before normalising.
    """
    real, synth = as_series(real, name="real"), as_series(synth, name="synth")
    if real.shape[2] != synth.shape[2]:
        raise InvalidRangeError("real and synthetic batches need the same number of features")
    return float(np.abs(_corr(real, "real") - _corr(synth, "synth")).sum() / 10.0)


def aggregate_inversion_error(x0_hat, x0) -> dict[str, np.ndarray]:
    """Per-(sample, feature) and per-(sample, timestep) mean errors.

    Keys ``time``/``features`` hold mean absolute errors (shapes ``(B, F)`` and
    ``(B, W)``); ``time_signed``/``features_signed`` the signed means.
    """
    x0_hat, x0 = np.asarray(x0_hat, dtype=np.float64), np.asarray(x0, dtype=np.float64)
    if x0_hat.shape != x0.shape or x0.ndim != 3:
        raise InvalidRangeError(f"shape mismatch: {x0_hat.shape} vs {x0.shape}")
    diff = x0_hat - x0
    return {
        "time": np.abs(diff).mean(axis=1),
        "features": np.abs(diff).mean(axis=2),
        "time_signed": diff.mean(axis=1),
        "features_signed": diff.mean(axis=2),
    }


def x1_x0_distance(traj: Trajectory | tuple) -> tuple[float, float]:
    """Mean and max over samples of the per-sample mean ``|x1 - x0|``."""
    if isinstance(traj, Trajectory):
        x1, x0 = traj.x1, traj.x0
    else:
        x1, x0 = traj
    per_sample = np.abs(np.asarray(x1) - np.asarray(x0)).reshape(len(x0), -1).mean(axis=1)
    return float(per_sample.mean()), float(per_sample.max())


def _pooled_moments(x: np.ndarray, name: str):
    flat = x.reshape(-1, x.shape[2])
    mean = flat.mean(axis=0)
    c = flat - mean
    m2 = (c**2).mean(axis=0)
    if np.any(m2 <= 0):
        raise DegenerateFeatureError(f"{name}: feature(s) {np.flatnonzero(m2 <= 0).tolist()} have zero variance")
    skew = (c**3).mean(axis=0) / m2**1.5
    kurt = (c**4).mean(axis=0) / m2**2 - 3.0
    return mean, m2, skew, kurt


def _acf(x: np.ndarray, mean, var, lags: int) -> np.ndarray:
    c = x - mean
    W = x.shape[1]
    out = np.zeros((lags, x.shape[2]))
    for lag in range(1, lags + 1):
        if lag < W:
            out[lag - 1] = (c[:, lag:] * c[:, :-lag]).mean(axis=(0, 1)) / var
    return out


def tsg_metrics(real, synth, bins: int = HIST_BINS, lags: int = ACF_LAGS) -> dict[str, float]:
    """Moment-based distribution differences, each averaged over features.

    * ``mdd``: L1 distance between ``bins``-bin probability histograms on the
      pooled range of both batches.
    * ``acd``: mean absolute difference of autocorrelations at lags ``1..lags``
      (pooled over samples, centred on the feature mean).
    * ``sd``/``kd``: absolute difference of skewness / excess kurtosis.
    """
    real, synth = as_series(real, name="real"), as_series(synth, name="synth")
    if real.shape[2] != synth.shape[2]:
        raise InvalidRangeError("real and synthetic batches need the same number of features")
    mr, vr, sr, kr = _pooled_moments(real, "real")
    ms, vs, ss, ks = _pooled_moments(synth, "synth")
    F = real.shape[2]
    mdd = np.empty(F)
    for f in range(F):
        a, b = real[..., f].ravel(), synth[..., f].ravel()
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
        hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
        mdd[f] = np.abs(ha / a.size - hb / b.size).sum()
    acd = np.abs(_acf(real, mr, vr, lags) - _acf(synth, ms, vs, lags)).mean(axis=0)
    return {
        "mdd": float(mdd.mean()),
        "acd": float(acd.mean()),
        "sd": float(np.abs(sr - ss).mean()),
        "kd": float(np.abs(kr - ks).mean()),
    }


def quality_report(real, synth) -> QualityReport:
    return QualityReport(correlational_score(real, synth), **tsg_metrics(real, synth))
