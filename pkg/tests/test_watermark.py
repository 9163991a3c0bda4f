import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from timewak.core import InvalidRangeError, WatermarkKey, gaussian_ppf, inverse_permutation
from timewak.detect import recover_seeds
from timewak.watermark import (
    EmbedParams,
    SeedMatrix,
    chain_hash,
    chain_permutations,
    construct_noise,
    embed,
    generate_seeds,
    interval_starts,
    temporal_shuffle,
    temporal_unshuffle,
    valid_rows,
)


def test_interval_rows():
    assert interval_starts(8, 2).tolist() == [0, 2, 4, 6]
    assert interval_starts(7, 3).tolist() == [0, 3]
    assert valid_rows(7, 3).tolist() == [1, 2, 4, 5, 6]
    assert valid_rows(5, 1).size == 0


def test_chain_hash_single_feature(key):
    assert chain_hash(key, 3, np.array([1])).tolist() == [1]


def test_chain_hash_preserves_multiset(key):
    out = chain_hash(key, 5, np.array([1, 0, 1]))
    assert sorted(out.tolist()) == [0, 1, 1]


def test_chain_hash_inverse(key, rng):
    for w in range(2, 22):
        prev = rng.integers(0, 4, size=7)
        out = chain_hash(key, w, prev)
        perm = chain_permutations(key, 24, 7)[w - 1]
        assert np.array_equal(out[inverse_permutation(perm)], prev)


@pytest.mark.parametrize("W,F,L,H", [(24, 6, 2, 2), (7, 3, 3, 3), (9, 5, 4, 4), (6, 1, 2, 6)])
def test_chain_property(key, W, F, L, H):
    s = generate_seeds(EmbedParams(key, W, F, L, H)).seeds
    assert s.shape == (W, F) and s.min() >= 0 and s.max() < L
    for i in valid_rows(W, H):
        assert np.array_equal(s[i], chain_hash(key, i + 1, s[i - 1]))


def test_single_interval_is_one_chain(key):
    s = generate_seeds(EmbedParams(key, 6, 4, 3, 6)).seeds
    for i in range(1, 6):
        assert sorted(s[i]) == sorted(s[0])


def test_small_case_multisets(key):
    s = generate_seeds(EmbedParams(key, 4, 3, 2, 2)).seeds
    assert sorted(s[1]) == sorted(s[0])
    assert sorted(s[3]) == sorted(s[2])


def test_h1_has_no_chain(key):
    m = generate_seeds(EmbedParams(key, 5, 3, 2, 1))
    assert m.valid_rows.size == 0 and m.n_intervals == 5


def test_seed_uniformity_at_interval_starts():
    for L in (2, 3, 4):
        draws = []
        i = 0
        while len(draws) < 10_000:
            p = EmbedParams(WatermarkKey.from_seed(f"uniformity-{i}"), 24, 10, L, 2)
            draws.extend(generate_seeds(p).seeds[interval_starts(24, 2)].ravel().tolist())
            i += 1
        counts = np.bincount(draws, minlength=L) / len(draws)
        sigma = math.sqrt((1 / L) * (1 - 1 / L) / len(draws))
        assert np.all(np.abs(counts - 1 / L) <= 3 * sigma)


def test_shuffle_identity_for_single_row(key):
    m = SeedMatrix(np.array([[0, 1, 1]]), 2, 1)
    assert np.array_equal(temporal_shuffle(m, key).seeds, m.seeds)


def test_shuffle_keeps_column_multisets(key, rng):
    for _ in range(10):
        m = SeedMatrix(rng.integers(0, 3, size=(8, 5)), 3, 2)
        sh = temporal_shuffle(m, key)
        for f in range(5):
            assert np.array_equal(np.bincount(sh.seeds[:, f], minlength=3), np.bincount(m.seeds[:, f], minlength=3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(2, 4), st.integers(0, 2**31))
def test_shuffle_round_trip(W, F, L, seed):
    key = WatermarkKey.from_seed(seed)
    m = SeedMatrix(np.random.default_rng(seed).integers(0, L, size=(W, F)), L, 1)
    assert np.array_equal(temporal_unshuffle(temporal_shuffle(m, key), key).seeds, m.seeds)
    batch = np.stack([temporal_shuffle(m, key).seeds] * 3)
    assert np.array_equal(temporal_unshuffle(batch, key), np.stack([m.seeds] * 3))


def test_construct_noise_strata(key):
    for L in (2, 3, 4):
        m = generate_seeds(EmbedParams(key, 12, 5, L, 2))
        x = construct_noise(m, key, 3)[0]
        lo = np.where(m.seeds == 0, -np.inf, gaussian_ppf(np.clip(m.seeds / L, 1e-300, 1)))
        hi = np.where(m.seeds == L - 1, np.inf, gaussian_ppf(np.clip((m.seeds + 1) / L, 0, 1 - 1e-16)))
        assert np.all((x >= lo) & (x <= hi))
        assert np.array_equal(recover_seeds(x, L), m.seeds)


def test_construct_noise_uses_keyed_uniforms(key):
    m = SeedMatrix(np.array([[0, 1], [1, 0]]), 2, 2)
    u = key.prf("noise-u").uniform_block(("noise-u", 0), (2, 2))
    assert np.allclose(construct_noise(m, key, 0)[0], gaussian_ppf((u + m.seeds) / 2), rtol=0, atol=0)
    assert gaussian_ppf((0.5 + 0) / 2) == pytest.approx(-0.674490, abs=1e-6)
    assert gaussian_ppf((0.5 + 1) / 2) == pytest.approx(0.674490, abs=1e-6)


def test_embed_batch(key):
    params = EmbedParams(key, 8, 4, 3, 2)
    noise, seeds = embed(params, 2)
    assert noise.shape == (2, 8, 4)
    assert not np.array_equal(noise[0], noise[1])
    rec = recover_seeds(noise, 3)
    assert np.array_equal(rec[0], rec[1])
    assert np.array_equal(temporal_unshuffle(rec[0], key), seeds.seeds)
    again, _ = embed(params, 2)
    assert np.array_equal(again, noise)


def test_embedded_noise_is_standard_normal():
    pooled = np.concatenate([embed(EmbedParams(WatermarkKey.from_seed(f"ks-{i}"), 24, 10, 2, 2), 1)[0].ravel()
                             for i in range(420)])
    assert pooled.size >= 100_000
    assert abs(pooled.mean()) < 0.01
    assert abs(pooled.var() - 1) < 0.02
    assert stats.kstest(pooled, "norm").statistic < 0.01


@pytest.mark.parametrize("kw", [dict(W=0, F=1), dict(W=4, F=2, L=1), dict(W=4, F=2, H=5), dict(W=4, F=2, H=0)])
def test_embed_params_validation(key, kw):
    with pytest.raises(InvalidRangeError):
        EmbedParams(key, **kw)


def test_seed_matrix_validation():
    with pytest.raises(InvalidRangeError):
        SeedMatrix(np.array([[0, 2]]), 2, 1)
    with pytest.raises(InvalidRangeError):
        SeedMatrix(np.array([0, 1]), 2, 1)
    with pytest.raises(InvalidRangeError):
        embed(EmbedParams(WatermarkKey.from_seed(0), 4, 2), 0)


def test_transposed_params(key):
    p = EmbedParams(key, 24, 10, 3, 4).transposed()
    assert (p.W, p.F, p.L, p.H) == (10, 24, 3, 4)
