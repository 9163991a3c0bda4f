import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cdf_erf, ppf_bisect, schedule_loop
from timewak.core import (
    InvalidRangeError,
    Prf,
    WatermarkKey,
    as_series,
    build_schedule,
    gaussian_cdf,
    gaussian_ppf,
    inverse_permutation,
    keyed_permutation,
    uniform_unit,
)


def test_two_step_schedule_by_hand():
    s = build_schedule(2, "linear", 0.1, 0.1)
    assert s.alpha_bar[1] == pytest.approx(0.9, abs=1e-15)
    assert s.alpha_bar[2] == pytest.approx(0.81, abs=1e-15)
    assert s.ddim_a[2] == pytest.approx(math.sqrt(0.9 / 0.81), abs=1e-14)
    assert s.ddim_a[2] == pytest.approx(1.05409, abs=1e-5)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [2, 10, 100, 1000])
def test_schedule_invariants(kind, T):
    s = build_schedule(T, kind)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.ddim_a[1:] > 0)
    assert np.all(s.ddim_b[1:] < 0)
    lhs = s.ddim_a[1:] * np.sqrt(s.alpha_bar[1:])
    assert np.max(np.abs(lhs / np.sqrt(s.alpha_bar[:-1]) - 1)) < 1e-12


def test_linear_schedule_matches_loop_oracle():
    s = build_schedule(1000, "linear", 1e-4, 0.02)
    ab, a, b = schedule_loop(np.linspace(1e-4, 0.02, 1000).tolist())
    assert np.allclose(s.alpha_bar, ab, rtol=1e-12, atol=0)
    assert np.allclose(s.ddim_a, a, rtol=1e-12, atol=0)
    assert np.allclose(s.ddim_b, b, rtol=1e-10, atol=1e-15)
    assert ab[-1] < 1e-3


def test_schedule_arrays_are_read_only():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bar[3] = 0.5


@pytest.mark.parametrize("kw", [dict(T=1), dict(T=10, gamma=0.0), dict(T=10, gamma=1.5),
                                dict(T=10, beta_min=0.0), dict(T=10, beta_min=0.3, beta_max=0.2),
                                dict(T=10, kind="quadratic")])
def test_schedule_rejects_bad_input(kw):
    with pytest.raises(InvalidRangeError):
        build_schedule(**kw)


def test_with_gamma():
    s = build_schedule(10).with_gamma(0.5)
    assert s.gamma == 0.5 and s.T == 10


def test_ppf_known_values():
    assert gaussian_ppf(0.5) == 0.0
    assert gaussian_ppf(0.75) == pytest.approx(ppf_bisect(0.75), abs=1e-12)
    assert gaussian_ppf(0.75) == pytest.approx(0.674489750196, abs=1e-11)
    for x in (0.5, 1.0, 2.0):
        assert gaussian_cdf(-x) + gaussian_cdf(x) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("p", [1e-10, 1e-6, 0.01, 0.2, 0.5, 0.8, 0.99, 1 - 1e-6])
def test_ppf_matches_bisection_oracle(p):
    assert gaussian_ppf(p) == pytest.approx(ppf_bisect(p), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("x", [-6.0, -1.3, 0.0, 0.4, 2.5, 7.0])
def test_cdf_matches_erf_oracle(x):
    assert gaussian_cdf(x) == pytest.approx(cdf_erf(x), rel=1e-13, abs=1e-300)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_ppf_domain(p):
    with pytest.raises(InvalidRangeError):
        gaussian_ppf(p)


def test_ppf_vectorised():
    p = np.array([0.25, 0.5, 0.75])
    out = gaussian_ppf(p)
    assert out.shape == (3,) and out[1] == 0.0 and out[0] == -out[2]


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-10, max_value=1 - 1e-10))
def test_ppf_cdf_round_trip(p):
    assert abs(gaussian_cdf(gaussian_ppf(p)) - p) <= 1e-12


def test_prf_determinism_and_separation(key):
    p1, p2 = key.prf("a"), key.prf("a")
    assert p1(("x", 1)) == p2(("x", 1))
    assert p1(("x", 1)) != p1(("x", 2))
    assert key.subkey("a") != key.subkey("b")
    assert key.prf("a")(("x", 1)) != key.prf("b")(("x", 1))
    assert 0 <= p1(("x", 1)) < 2**64
    assert np.array_equal(p1.normal_block(("n",), (3, 4)), p2.normal_block(("n",), (3, 4)))


def test_prf_tag_encoding_is_unambiguous(key):
    prf = key.prf("t")
    assert prf(("ab", "c")) != prf(("a", "bc"))
    assert prf((1,)) != prf(("1",))


def test_key_construction():
    k = WatermarkKey.generate()
    assert len(k.hex()) == 64
    assert WatermarkKey.from_hex(k.hex()) == k
    assert WatermarkKey.from_seed(1) == WatermarkKey.from_seed(1) != WatermarkKey.from_seed(2)
    assert k.child(0) != k.child(1)
    with pytest.raises(InvalidRangeError):
        WatermarkKey.from_hex("zz")
    with pytest.raises(InvalidRangeError):
        WatermarkKey(b"short")
    with pytest.raises(InvalidRangeError):
        Prf(b"\x00" * 31)


def test_keyed_permutation_is_bijection_for_all_sizes(key):
    prf = key.prf("perm")
    for n in range(1, 65):
        perm = keyed_permutation(prf, n, ("size", n))
        assert sorted(perm.tolist()) == list(range(n))
    assert keyed_permutation(prf, 1).tolist() == [0]


def test_keyed_permutation_deterministic_and_invertible(key, rng):
    prf = key.prf("perm")
    for case in range(10):
        n = int(rng.integers(2, 40))
        perm = keyed_permutation(prf, n, ("case", case))
        assert np.array_equal(perm, keyed_permutation(prf, n, ("case", case)))
        inv = inverse_permutation(perm)
        assert np.array_equal(perm[inv], np.arange(n))
        assert np.array_equal(inv[perm], np.arange(n))
    with pytest.raises(InvalidRangeError):
        keyed_permutation(prf, 0)


def test_keyed_permutation_is_roughly_uniform(key):
    prf = key.prf("perm")
    counts = np.zeros((3, 3))
    for i in range(3000):
        perm = keyed_permutation(prf, 3, (i,))
        counts[np.arange(3), perm] += 1
    assert np.all(np.abs(counts - 1000) < 4 * math.sqrt(1000 * 2 / 3))


def test_uniform_unit(key):
    prf = key.prf("u")
    assert uniform_unit(prf, (1,)) == uniform_unit(prf, (1,))
    draws = np.array([uniform_unit(prf, (i,)) for i in range(1_000_000)])
    assert np.all((draws > 0) & (draws < 1))
    assert abs(draws.mean() - 0.5) < 0.01


def test_as_series():
    x = as_series(np.zeros((4, 3)))
    assert x.shape == (1, 4, 3) and x.dtype == np.float64
    with pytest.raises(InvalidRangeError):
        as_series(np.array([[np.nan]]))
    with pytest.raises(InvalidRangeError):
        as_series(np.zeros(3))
