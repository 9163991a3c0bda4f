"""Post-editing attacks on generated series.

Attack randomness comes from an attacker key (a fixed public default unless
one is passed), never from the watermark key.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidRangeError, NoiseSchedule, WatermarkKey, as_series, keyed_permutation
from .diffusion import NoiseEstimator, ddim_sample, q_sample

__all__ = [
    "AttackSpec",
    "ATTACK_KINDS",
    "offset_attack",
    "crop_attack",
    "minmax_insert_attack",
    "reconstruction_attack",
    "apply_attack",
]

ATTACK_KINDS = ("none", "offset", "random_crop", "minmax_insert", "reconstruct")
_ALIASES = {"crop": "random_crop", "minmax": "minmax_insert", "insert": "minmax_insert",
            "reconstruction": "reconstruct"}
DEFAULT_ATTACK_KEY = WatermarkKey.from_seed("attacker")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    strength: float = 0.0
    rng_tag: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in ATTACK_KINDS:
            raise InvalidRangeError(f"unknown attack {self.kind!r}; choose from {', '.join(ATTACK_KINDS)}")
        object.__setattr__(self, "kind", kind)
        _check_strength(self.strength)

    @classmethod
    def parse(cls, text: str, rng_tag: int = 0) -> "AttackSpec":
        """Parse ``kind:strength``; strength may be a fraction or a percentage (``crop:30%``)."""
        kind, _, raw = text.partition(":")
        raw = raw.strip()
        if not raw:
            strength = 0.0
        elif raw.endswith("%"):
            strength = float(raw[:-1]) / 100.0
        else:
            strength = float(raw)
        return cls(kind.strip(), strength, rng_tag)

    def __str__(self):
        return f"{self.kind}:{self.strength:g}"


def _check_strength(p: float):
    if not 0.0 <= p <= 1.0:
        raise InvalidRangeError(f"attack strength must lie in [0, 1], got {p}")


def offset_attack(x, p: float) -> np.ndarray:
    """Shift each feature by ``p`` times its mean absolute value."""
    _check_strength(p)
    x = as_series(x)
    return x + p * np.abs(x).mean(axis=1, keepdims=True)


def crop_attack(x, p: float, rng_tag: int = 0, key: WatermarkKey | None = None) -> np.ndarray:
    """Zero a contiguous ``ceil(pW) x ceil(pF)`` block per sample at a keyed origin."""
    _check_strength(p)
    x = as_series(x)
    B, W, F = x.shape
    h, c = math.ceil(p * W - 1e-12), math.ceil(p * F - 1e-12)
    out = x.copy()
    if h == 0 or c == 0:
        return out
    prf = (key or DEFAULT_ATTACK_KEY).prf("crop")
    for b in range(B):
        w0 = prf(("crop-w", rng_tag, b)) % (W - h + 1)
        f0 = prf(("crop-f", rng_tag, b)) % (F - c + 1)
        out[b, w0:w0 + h, f0:f0 + c] = 0.0
    return out


def minmax_insert_attack(x, p: float, rng_tag: int = 0, key: WatermarkKey | None = None) -> np.ndarray:
    """Per sample and feature, overwrite ``floor(pW)`` keyed timesteps with
    uniform values between that feature's min and max."""
    _check_strength(p)
    x = as_series(x)
    B, W, F = x.shape
    k = math.floor(p * W + 1e-12)
    out = x.copy()
    if k == 0:
        return out
    key = key or DEFAULT_ATTACK_KEY
    prf = key.prf("minmax")
    lo, hi = x.min(axis=1), x.max(axis=1)
    for b in range(B):
        u = prf.uniform_block(("minmax-values", rng_tag, b), (k, F))
        for f in range(F):
            rows = keyed_permutation(prf, W, ("minmax-rows", rng_tag, b, f))[:k]
            out[b, rows, f] = lo[b, f] + u[:, f] * (hi[b, f] - lo[b, f])
    return out


def reconstruction_attack(x, est: NoiseEstimator, sched: NoiseSchedule, rng_tag: int = 0,
                          key: WatermarkKey | None = None) -> np.ndarray:
    """Noise to step ``T // 2`` with fresh Gaussian noise, then denoise with DDIM."""
    x = as_series(x)
    t_half = max(sched.T // 2, 1)
    noise = (key or DEFAULT_ATTACK_KEY).prf("reconstruct").normal_block(("reconstruct", rng_tag), x.shape)
    return ddim_sample(q_sample(x, t_half, noise, sched), est, sched, start=t_half)


def apply_attack(x, spec: AttackSpec, est: NoiseEstimator | None = None, sched: NoiseSchedule | None = None,
                 key: WatermarkKey | None = None) -> np.ndarray:
    if spec.kind == "none" or (spec.strength == 0 and spec.kind != "reconstruct"):
        return as_series(x).copy()
    if spec.kind == "offset":
        return offset_attack(x, spec.strength)
    if spec.kind == "random_crop":
        return crop_attack(x, spec.strength, spec.rng_tag, key)
    if spec.kind == "minmax_insert":
        return minmax_insert_attack(x, spec.strength, spec.rng_tag, key)
    if est is None or sched is None:
        raise InvalidRangeError("the reconstruction attack needs an estimator and schedule")
    return reconstruction_attack(x, est, sched, spec.rng_tag, key)
