"""Seed generation by temporal chained hashing, keyed shuffles and noise construction.

Timesteps are 1-based in the interval arithmetic (interval ``k`` starts at
``w = k*H + 1``) and 0-based in array indexing, so row ``i`` of a seed matrix
is timestep ``w = i + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (
    InvalidRangeError,
    WatermarkKey,
    gaussian_ppf,
    inverse_permutation,
    keyed_permutation,
)

__all__ = [
    "EmbedParams",
    "SeedMatrix",
    "chain_permutations",
    "chain_hash",
    "generate_seeds",
    "temporal_permutations",
    "temporal_shuffle",
    "temporal_unshuffle",
    "construct_noise",
    "embed",
]


@dataclass(frozen=True)
class EmbedParams:
    key: WatermarkKey
    W: int
    F: int
    L: int = 2
    H: int = 2

    def __post_init__(self):
        if self.W < 1 or self.F < 1:
            raise InvalidRangeError("W and F must be >= 1")
        if self.L < 2:
            raise InvalidRangeError(f"L must be >= 2, got {self.L}")
        if not 1 <= self.H <= self.W:
            raise InvalidRangeError(f"H must lie in [1, W={self.W}], got {self.H}")

    def transposed(self) -> "EmbedParams":
        """Same key and levels with the time and feature axes swapped."""
        return EmbedParams(self.key, self.F, self.W, self.L, min(self.H, self.F))


def interval_starts(W: int, H: int) -> np.ndarray:
    """0-based rows that start an interval; remainder rows extend the last one."""
    return np.arange(W // H) * H


def valid_rows(W: int, H: int) -> np.ndarray:
    """0-based rows whose seeds are chain-derived and can be checked."""
    mask = np.ones(W, dtype=bool)
    mask[interval_starts(W, H)] = False
    return np.flatnonzero(mask)


@dataclass(frozen=True)
class SeedMatrix:
    seeds: np.ndarray
    L: int
    H: int

    def __post_init__(self):
        s = np.asarray(self.seeds)
        if s.ndim != 2:
            raise InvalidRangeError("seed matrix must be 2-D (W, F)")
        if s.size and (s.min() < 0 or s.max() >= self.L):
            raise InvalidRangeError(f"seeds must lie in 0..{self.L - 1}")
        object.__setattr__(self, "seeds", s.astype(np.int64))

    @property
    def window(self) -> int:
        return self.seeds.shape[0]

    @property
    def features(self) -> int:
        return self.seeds.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.window // self.H

    @property
    def valid_rows(self) -> np.ndarray:
        return valid_rows(self.window, self.H)

    def with_seeds(self, seeds) -> "SeedMatrix":
        return SeedMatrix(np.asarray(seeds), self.L, self.H)


@lru_cache(maxsize=4096)
def _cached_perm(master: bytes, purpose: str, n: int, index: int) -> np.ndarray:
    perm = keyed_permutation(WatermarkKey(master).prf(purpose), n, (purpose, index))
    perm.setflags(write=False)
    return perm


def chain_permutations(key: WatermarkKey, W: int, F: int) -> np.ndarray:
    """Row ``i`` is the feature permutation used to derive row ``i`` from row ``i-1``.

    Row 0 is never used by the chain and holds the identity.
    """
    out = np.empty((W, F), dtype=np.int64)
    out[0] = np.arange(F)
    for i in range(1, W):
        out[i] = _cached_perm(key.master, "chain-hash", F, i + 1)
    return out


def chain_hash(key: WatermarkKey, w: int, prev) -> np.ndarray:
    """Seed row at 1-based timestep ``w``: ``prev`` with its features reordered."""
    prev = np.asarray(prev)
    return prev[..., _cached_perm(key.master, "chain-hash", prev.shape[-1], int(w))]


def generate_seeds(params: EmbedParams) -> SeedMatrix:
    W, F, L, H = params.W, params.F, params.L, params.H
    prf = params.key.prf("seed-sample")
    perms = chain_permutations(params.key, W, F)
    starts = set(interval_starts(W, H).tolist())
    seeds = np.empty((W, F), dtype=np.int64)
    for i in range(W):
        if i in starts:
            k = i // H
            seeds[i] = [prf(("seed-sample", k, f)) % L for f in range(F)]
        else:
            seeds[i] = seeds[i - 1][perms[i]]
    return SeedMatrix(seeds, L, H)


def temporal_permutations(key: WatermarkKey, W: int, F: int) -> np.ndarray:
    """Column ``f`` holds the keyed permutation applied to feature ``f``."""
    return np.stack([_cached_perm(key.master, "temporal-shuffle", W, f) for f in range(F)], axis=1)


def temporal_shuffle(seeds: SeedMatrix, key: WatermarkKey) -> SeedMatrix:
    s = seeds.seeds
    perms = temporal_permutations(key, *s.shape)
    return seeds.with_seeds(np.take_along_axis(s, perms, axis=0))


def temporal_unshuffle(seeds, key: WatermarkKey):
    """Inverse of :func:`temporal_shuffle`.  Accepts a SeedMatrix or an integer
    array of shape ``(..., W, F)``."""
    arr = seeds.seeds if isinstance(seeds, SeedMatrix) else np.asarray(seeds)
    W, F = arr.shape[-2:]
    inv = np.stack([inverse_permutation(p) for p in temporal_permutations(key, W, F).T], axis=1)
    idx = np.broadcast_to(inv, arr.shape)
    out = np.take_along_axis(arr, idx, axis=-2)
    return seeds.with_seeds(out) if isinstance(seeds, SeedMatrix) else out


def construct_noise(seeds: SeedMatrix, key: WatermarkKey, batch_tag: int = 0) -> np.ndarray:
    """Map each seed to its Gaussian quantile stratum: ``ppf((u + s) / L)``.

    ``seeds`` is embedded as given (pass the shuffled matrix).  Returns a
    ``(1, W, F)`` array; ``u`` is drawn per entry from the ``noise-u`` stream.
    """
    u = key.prf("noise-u").uniform_block(("noise-u", int(batch_tag)), seeds.seeds.shape)
    return gaussian_ppf((u + seeds.seeds) / seeds.L)[None]


def embed(params: EmbedParams, batch: int = 1) -> tuple[np.ndarray, SeedMatrix]:
    """Watermarked initial noise for ``batch`` samples plus the unshuffled seeds."""
    if batch < 1:
        raise InvalidRangeError("batch must be >= 1")
    seeds = generate_seeds(params)
    shuffled = temporal_shuffle(seeds, params.key)
    noise = np.concatenate([construct_noise(shuffled, params.key, b) for b in range(batch)])
    return noise, seeds
