"""Shared substrate: series arrays, diffusion schedules and keyed randomness.

Every random quantity in the package is derived from a :class:`WatermarkKey`
through :class:`Prf`, so results are reproducible bit-for-bit and do not depend
on evaluation order or thread count.
"""
from __future__ import annotations

import hashlib
import math
import secrets
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

__all__ = [
    "TimeWakError",
    "InvalidRangeError",
    "NoiseSchedule",
    "WatermarkKey",
    "Prf",
    "as_series",
    "build_schedule",
    "keyed_permutation",
    "inverse_permutation",
    "uniform_unit",
    "gaussian_ppf",
    "gaussian_cdf",
]

# smallest distance kept from 0 and 1 so that the normal quantile stays finite
UNIT_EPS = 2.0**-53

SUBKEY_TAGS = ("chain-hash", "temporal-shuffle", "seed-sample", "noise-u")


class TimeWakError(Exception):
    """Base class for all package errors."""


class InvalidRangeError(TimeWakError, ValueError):
    pass


def as_series(x, *, name: str = "x") -> np.ndarray:
    """Validate and return a float64 ``(batch, window, features)`` array.

    A 2-D ``(window, features)`` input is promoted to a batch of one.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidRangeError(f"{name} must have shape (B, W, F) with all dims >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidRangeError(f"{name} contains non-finite values")
    return arr


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients of a T-step variance-preserving diffusion.

    Arrays have length ``T + 1`` and are indexed by the diffusion step, with
    step 0 the clean-data convention ``alpha_bar[0] = 1``.  ``ddim_a[t]`` and
    ``ddim_b[t]`` give the deterministic DDIM update
    ``x[t-1] = ddim_a[t] * x[t] + ddim_b[t] * eps_hat(x[t], t)``; their
    index-0 entries are unused and set to 1 and 0.
    """

    steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    ddim_a: np.ndarray
    ddim_b: np.ndarray
    gamma: float
    kind: str = "linear"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidRangeError(f"gamma must lie in (0, 1], got {self.gamma}")
        for name in ("beta", "alpha_bar", "ddim_a", "ddim_b"):
            arr = getattr(self, name)
            arr.setflags(write=False)
            if arr.shape != (self.steps + 1,):
                raise InvalidRangeError(f"{name} must have length T+1={self.steps + 1}")

    @property
    def T(self) -> int:
        return self.steps

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    def with_gamma(self, gamma: float) -> "NoiseSchedule":
        return NoiseSchedule(self.steps, self.beta.copy(), self.alpha_bar.copy(), self.ddim_a.copy(),
                             self.ddim_b.copy(), gamma, self.kind)


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    return f / (math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2)


def build_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 0.02,
                   gamma: float = 1.0) -> NoiseSchedule:
    """Build a ``T``-step schedule.

    ``linear`` spaces beta evenly in ``[beta_min, beta_max]``.  ``cosine`` uses
    the squared-cosine cumulative product with offset 0.008, with each derived
    beta clipped to ``[beta_min, beta_max]`` so the same range limits apply.
    """
    if T < 2:
        raise InvalidRangeError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRangeError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        ab = _cosine_alpha_bar(T)
        betas = np.clip(1.0 - ab[1:] / ab[:-1], beta_min, beta_max)
    else:
        raise InvalidRangeError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - beta)
    a = np.ones(T + 1)
    b = np.zeros(T + 1)
    a[1:] = np.sqrt(alpha_bar[:-1] / alpha_bar[1:])
    b[1:] = np.sqrt(1.0 - alpha_bar[:-1]) - a[1:] * np.sqrt(1.0 - alpha_bar[1:])
    return NoiseSchedule(T, beta, alpha_bar, a, b, float(gamma), kind)


# --------------------------------------------------------------------------- keys and PRF


def _encode_tag(tag: Sequence) -> bytes:
    parts = []
    for item in tag:
        if isinstance(item, str):
            raw = item.encode()
            parts.append(b"s" + struct.pack("<I", len(raw)) + raw)
        else:
            parts.append(b"i" + struct.pack("<q", int(item)))
    return b"".join(parts)


@dataclass(frozen=True)
class Prf:
    """Keyed pseudo-random function over tuples of strings and integers.

    ``prf(tag)`` is the first 8 bytes (little-endian) of a keyed BLAKE2b digest
    of the encoded tag.
    """

    key: bytes

    def __post_init__(self):
        if len(self.key) != 32:
            raise InvalidRangeError("PRF key must be 32 bytes")

    def digest(self, tag: Sequence, size: int = 8) -> bytes:
        return hashlib.blake2b(_encode_tag(tag), key=self.key, digest_size=size).digest()

    def __call__(self, tag: Sequence) -> int:
        return int.from_bytes(self.digest(tag), "little")

    def generator(self, tag: Sequence) -> np.random.Generator:
        """Counter-based Philox stream keyed by this PRF at ``tag``.

        Used wherever whole blocks of draws are needed; the stream is fully
        determined by the key and tag.
        """
        d = self.digest(tag, 16)
        words = np.frombuffer(d, dtype="<u8").astype(np.uint64)
        return np.random.Generator(np.random.Philox(key=words))

    def uniform_block(self, tag: Sequence, shape) -> np.ndarray:
        u = self.generator(tag).random(shape)
        return np.clip(u, UNIT_EPS, 1.0 - UNIT_EPS)

    def normal_block(self, tag: Sequence, shape) -> np.ndarray:
        return self.generator(tag).standard_normal(shape)


@dataclass(frozen=True)
class WatermarkKey:
    """Master secret plus purpose-separated sub-keys."""

    master: bytes
    _subkeys: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(self.master) != 32:
            raise InvalidRangeError("master key must be 32 bytes (256 bits)")

    @classmethod
    def generate(cls) -> "WatermarkKey":
        return cls(secrets.token_bytes(32))

    @classmethod
    def from_hex(cls, text: str) -> "WatermarkKey":
        text = text.strip()
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise InvalidRangeError(f"key is not valid hex: {exc}") from None
        return cls(raw)

    @classmethod
    def from_seed(cls, seed: int | str) -> "WatermarkKey":
        """Deterministic key for tests and experiments (not for real secrets)."""
        return cls(hashlib.sha256(f"timewak-seed:{seed}".encode()).digest())

    def hex(self) -> str:
        return self.master.hex()

    def subkey(self, tag: str) -> bytes:
        if tag not in self._subkeys:
            self._subkeys[tag] = hashlib.blake2b(tag.encode(), key=self.master, digest_size=32).digest()
        return self._subkeys[tag]

    def prf(self, tag: str) -> Prf:
        return Prf(self.subkey(tag))

    def child(self, *index) -> "WatermarkKey":
        """Independent key for a sub-experiment, e.g. one simulation round."""
        return WatermarkKey(Prf(self.subkey("child")).digest(index, 32))


def keyed_permutation(prf: Prf, domain_size: int, tag: Sequence = ()) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(domain_size)`` driven by ``prf``.

    The swap index at position ``i`` comes from ``prf(tag + (i,)) mod (i+1)``;
    the modulo bias is below ``domain_size / 2**64``.
    """
    if domain_size < 1:
        raise InvalidRangeError("domain_size must be >= 1")
    perm = np.arange(domain_size)
    tag = tuple(tag)
    for i in range(domain_size - 1, 0, -1):
        j = prf(tag + (i,)) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def uniform_unit(prf: Prf, tag: Sequence) -> float:
    u = ((prf(tag) >> 11) + 0.5) * 2.0**-53
    return min(max(u, UNIT_EPS), 1.0 - UNIT_EPS)


def gaussian_cdf(x):
    return special.ndtr(x)


def gaussian_ppf(p):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~(p_arr > 0.0) | ~(p_arr < 1.0)):
        raise InvalidRangeError("gaussian_ppf requires p in the open interval (0, 1)")
    out = special.ndtri(p_arr)
    return float(out) if np.ndim(p) == 0 else out
