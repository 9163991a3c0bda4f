"""Seed recovery, chain verification and detection statistics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import InvalidRangeError, NoiseSchedule, TimeWakError, WatermarkKey, as_series, gaussian_cdf
from .diffusion import NoiseEstimator, bdia_invert, bdia_sample
from .watermark import EmbedParams, SeedMatrix, chain_permutations, temporal_unshuffle, valid_rows

__all__ = [
    "DetectionReport",
    "RocPoint",
    "EmptyValidSetError",
    "DegenerateBaselineError",
    "InsufficientDataWarning",
    "recover_seeds",
    "unshuffle",
    "bit_accuracy",
    "z_score",
    "tpr_at_fpr",
    "detect",
    "build_report",
    "null_accuracies",
    "sample_accuracies",
    "invert_to_noise",
]

DEFAULT_FPRS = (0.001, 0.01, 0.1)


class EmptyValidSetError(TimeWakError):
    pass


class DegenerateBaselineError(TimeWakError):
    pass


class InsufficientDataWarning(UserWarning):
    pass


@dataclass
class RocPoint:
    fpr: float
    threshold: float
    tpr: float
    reliable: bool = True


@dataclass
class DetectionReport:
    per_sample_acc: list
    mean_acc_w: float
    baseline_mean: float
    baseline_std: float
    z: float
    n: int
    mode: str = "blind"
    tpr_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "mean_acc": self.mean_acc_w,
            "baseline_mean": self.baseline_mean,
            "baseline_std": self.baseline_std,
            "z": self.z,
            "tpr_curve": [asdict(p) for p in self.tpr_curve],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def recover_seeds(xT_hat, L: int) -> np.ndarray:
    """``floor(L * Phi(x))`` per entry, clamped to ``L - 1``."""
    x = np.asarray(xT_hat, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidRangeError("recovered noise contains non-finite values")
    s = np.floor(L * gaussian_cdf(x)).astype(np.int64)
    return np.minimum(s, L - 1)


def unshuffle(seeds, key: WatermarkKey):
    return temporal_unshuffle(seeds, key)


def bit_accuracy(recovered, key: WatermarkKey, H: int, L: int, reference: SeedMatrix | None = None,
                 valid_bits: bool = False) -> np.ndarray:
    """Fraction of checkable positions whose seed matches its expected value.

    ``recovered`` is an unshuffled integer array ``(W, F)`` or ``(B, W, F)``.
    Blind mode (no ``reference``) expects row ``w`` to equal the chain hash of
    recovered row ``w - 1``; informed mode compares with ``reference`` on the
    same rows.  With ``valid_bits`` only pairs where both symbols fall in the
    extreme strata ``{0, L-1}`` are counted (identical to the plain rule for
    ``L = 2``); samples with no such pair get NaN.

    Returns one accuracy per sample (a 0-d array for 2-D input).
    """
    rec = np.asarray(recovered)
    squeeze = rec.ndim == 2
    if squeeze:
        rec = rec[None]
    _, W, F = rec.shape
    rows = valid_rows(W, H)
    if rows.size == 0:
        raise EmptyValidSetError(f"no checkable timesteps for W={W}, H={H}")
    if reference is None:
        perms = chain_permutations(key, W, F)[rows]
        prev = rec[:, rows - 1, :]
        expected = np.take_along_axis(prev, np.broadcast_to(perms, prev.shape), axis=-1)
    else:
        ref = reference.seeds if isinstance(reference, SeedMatrix) else np.asarray(reference)
        if ref.shape != (W, F):
            raise InvalidRangeError(f"reference shape {ref.shape} != {(W, F)}")
        expected = np.broadcast_to(ref[rows], (rec.shape[0], len(rows), F))
    got = rec[:, rows, :]
    hits = got == expected
    if valid_bits and L > 2:
        mask = ((got == 0) | (got == L - 1)) & ((expected == 0) | (expected == L - 1))
        counts = mask.sum(axis=(1, 2))
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = np.where(counts > 0, (hits & mask).sum(axis=(1, 2)) / np.maximum(counts, 1), np.nan)
    else:
        acc = hits.mean(axis=(1, 2))
    return acc[0] if squeeze else acc


def z_score(acc_w, acc_nw, mode: str = "blind") -> DetectionReport:
    """Standardised gap ``(mean_w - mean_nw) / (std_nw / sqrt(n))``, n = len(acc_w).

    ``std_nw`` is the sample standard deviation (ddof=1).
    """
    acc_w = np.asarray(acc_w, dtype=np.float64)
    acc_nw = np.asarray(acc_nw, dtype=np.float64)
    if acc_w.size < 1:
        raise InvalidRangeError("need at least one watermarked accuracy")
    if acc_nw.size < 2:
        raise InvalidRangeError("need at least two baseline accuracies")
    mu_w, mu_nw = float(np.nanmean(acc_w)), float(np.nanmean(acc_nw))
    sd = float(np.nanstd(acc_nw, ddof=1))
    if not sd > 0:
        raise DegenerateBaselineError("baseline accuracies have zero spread")
    n = int(acc_w.size)
    z = (mu_w - mu_nw) / (sd / math.sqrt(n))
    return DetectionReport(acc_w.tolist(), mu_w, mu_nw, sd, z, n, mode)


def _records(acc, k: int) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.float64)
    m = len(acc) // k
    if m == 0:
        raise InvalidRangeError(f"need at least {k} accuracies to form one record")
    return acc[: m * k].reshape(m, k).mean(axis=1)


def tpr_at_fpr(acc_w, acc_nw, fpr: float, samples_per_record: int = 1) -> RocPoint:
    """TPR at a threshold calibrated on non-watermarked records.

    Accuracies are averaged in consecutive groups of ``samples_per_record``.
    The threshold is the ``1 - fpr`` quantile of the baseline record means,
    taking the higher order statistic; a record is flagged when strictly above
    it.  Fewer than ``1/fpr`` baseline records triggers an
    :class:`InsufficientDataWarning` and ``reliable=False``.
    """
    if not 0.0 < fpr < 1.0:
        raise InvalidRangeError("fpr must lie in (0, 1)")
    if samples_per_record < 1:
        raise InvalidRangeError("samples_per_record must be >= 1")
    rec_w = _records(acc_w, samples_per_record)
    rec_nw = _records(acc_nw, samples_per_record)
    reliable = len(rec_nw) >= math.ceil(1.0 / fpr - 1e-9)
    if not reliable:
        warnings.warn(f"{len(rec_nw)} baseline records cannot resolve fpr={fpr}; threshold is the sample "
                      "extreme", InsufficientDataWarning, stacklevel=2)
    threshold = float(np.quantile(rec_nw, 1.0 - fpr, method="higher"))
    tpr = float(np.mean(rec_w > threshold))
    return RocPoint(fpr, threshold, tpr, reliable)


def invert_to_noise(x0, est: NoiseEstimator | None, sched: NoiseSchedule | None) -> np.ndarray:
    """Estimated initial noise; with no schedule the input is taken as-is."""
    x0 = as_series(x0, name="x0")
    if sched is None:
        return x0
    return bdia_invert(x0, None, est, sched).xT


def sample_accuracies(x0, key: WatermarkKey, params: EmbedParams, est, sched, mode: str = "blind",
                      reference: SeedMatrix | None = None, valid_bits: bool = False) -> np.ndarray:
    """Per-sample accuracy of ``x0``: invert, recover, unshuffle, verify."""
    xT = invert_to_noise(x0, est, sched)
    seeds = unshuffle(recover_seeds(xT, params.L), key)
    if mode == "informed":
        if reference is None:
            raise InvalidRangeError("informed mode needs the reference seed matrix")
        return bit_accuracy(seeds, key, params.H, params.L, reference, valid_bits)
    if mode != "blind":
        raise InvalidRangeError(f"unknown detection mode {mode!r}")
    return bit_accuracy(seeds, key, params.H, params.L, None, valid_bits)


def null_accuracies(key: WatermarkKey, params: EmbedParams, est, sched, n: int, mode: str = "blind",
                    reference: SeedMatrix | None = None) -> np.ndarray:
    """Accuracies of ``n`` non-watermarked samples from the same model.

    Their initial noise is i.i.d. standard normal from a stream independent of
    the watermark sub-keys.
    """
    noise = key.prf("null-noise").normal_block(("null-noise", n), (n, params.W, params.F))
    x0 = noise if sched is None else bdia_sample(noise, est, sched).x0
    return sample_accuracies(x0, key, params, est, sched, mode, reference)


def detect(x0, key: WatermarkKey, params: EmbedParams, est: NoiseEstimator | None, sched: NoiseSchedule | None,
           mode: str = "blind", *, reference: SeedMatrix | None = None, baseline=None, null_samples: int = 200,
           samples_per_record: int = 1, fprs=DEFAULT_FPRS) -> DetectionReport:
    """End-to-end detection report for a batch of candidate series.

    ``baseline`` holds accuracies of known non-watermarked samples; when absent
    ``null_samples`` of them are generated through the same model.  Passing
    ``sched=None`` skips inversion (``x0`` is then treated as the noise itself).
    """
    acc = sample_accuracies(x0, key, params, est, sched, mode, reference)
    if baseline is None:
        baseline = null_accuracies(key, params, est, sched, null_samples, mode, reference)
    return build_report(acc, baseline, mode, samples_per_record, fprs)


def build_report(acc, baseline, mode: str = "blind", samples_per_record: int = 1,
                 fprs=DEFAULT_FPRS) -> DetectionReport:
    """Z-score plus one ROC point per FPR that the record counts allow."""
    report = z_score(acc, baseline, mode)
    curve = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientDataWarning)
        for fpr in fprs:
            if len(acc) >= samples_per_record and len(baseline) >= samples_per_record:
                curve.append(tpr_at_fpr(acc, baseline, fpr, samples_per_record))
    report.tpr_curve = curve
    return report
