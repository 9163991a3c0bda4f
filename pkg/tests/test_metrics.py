import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import correlational_loop, covariance_loop, inversion_error_loop, tsg_loop
from timewak.core import InvalidRangeError, build_schedule
from timewak.diffusion import Trajectory
from timewak.metrics import (
    DegenerateFeatureError,
    aggregate_inversion_error,
    correlational_score,
    covariance,
    quality_report,
    tsg_metrics,
    x1_x0_distance,
)


def test_covariance_examples(rng):
    x = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    assert covariance(x, 0, 1) == pytest.approx(4 / 3, abs=1e-15)
    const = np.column_stack([np.full(5, 3.0), rng.standard_normal(5)])
    assert covariance(const, 0, 1) == pytest.approx(0.0, abs=1e-15)
    y = rng.standard_normal((9, 3))
    assert covariance(y, 2, 2) >= 0
    assert covariance(y, 0, 2) == pytest.approx(covariance_loop(y.tolist(), 0, 2), abs=1e-14)


def test_correlational_examples(rng):
    x = rng.standard_normal((5, 12, 3))
    assert correlational_score(x, x) == 0.0
    assert correlational_score(x[..., :1], rng.standard_normal((4, 12, 1))) == pytest.approx(0.0, abs=1e-15)
    t = np.linspace(0, 1, 10)
    pos = np.stack([np.column_stack([t, 2 * t])] * 3)
    neg = np.stack([np.column_stack([t, -t])] * 3)
    assert correlational_score(pos, neg) == pytest.approx(0.4, abs=1e-14)


def test_correlational_affine_invariance(rng):
    real, synth = rng.standard_normal((4, 10, 3)), rng.standard_normal((6, 10, 3))
    scale, shift = np.array([2.0, 0.5, 7.0]), np.array([1.0, -3.0, 0.2])
    assert correlational_score(real * scale + shift, synth * scale + shift) == pytest.approx(
        correlational_score(real, synth), abs=1e-12)


def test_correlational_errors(rng):
    x = rng.standard_normal((2, 5, 2))
    x[:, :, 1] = 1.0
    with pytest.raises(DegenerateFeatureError):
        correlational_score(x, rng.standard_normal((2, 5, 2)))
    with pytest.raises(InvalidRangeError):
        correlational_score(rng.standard_normal((2, 5, 2)), rng.standard_normal((2, 5, 3)))


def test_inversion_error_examples(rng):
    x = rng.standard_normal((2, 3, 4))
    zero = aggregate_inversion_error(x, x)
    assert all(np.all(v == 0) for v in zero.values())
    shifted = aggregate_inversion_error(x - 0.25, x)
    assert np.allclose(shifted["time"], 0.25) and np.allclose(shifted["features"], 0.25)
    assert np.allclose(shifted["time_signed"], -0.25)
    assert shifted["time"].shape == (2, 4) and shifted["features"].shape == (2, 3)
    with pytest.raises(InvalidRangeError):
        aggregate_inversion_error(x, x[:1])


def test_inversion_error_batch_equivariance(rng):
    a, b = rng.standard_normal((5, 3, 2)), rng.standard_normal((5, 3, 2))
    perm = rng.permutation(5)
    full, permuted = aggregate_inversion_error(a, b), aggregate_inversion_error(a[perm], b[perm])
    for k in full:
        assert np.array_equal(full[k][perm], permuted[k])


def test_x1_x0_distance(rng):
    x0 = rng.standard_normal((3, 4, 2))
    sched = build_schedule(2)
    assert x1_x0_distance(Trajectory(np.stack([x0, x0, x0]), sched)) == (0.0, 0.0)
    x1 = rng.standard_normal((3, 4, 2))
    per = [sum(abs(x1[b, w, f] - x0[b, w, f]) for w in range(4) for f in range(2)) / 8 for b in range(3)]
    avg, mx = x1_x0_distance((x1, x0))
    assert avg == pytest.approx(sum(per) / 3, abs=1e-15) and mx == pytest.approx(max(per), abs=1e-15)


def test_tsg_zero_on_identical(rng):
    x = rng.standard_normal((4, 10, 3))
    assert tsg_metrics(x, x) == {"mdd": 0.0, "acd": 0.0, "sd": 0.0, "kd": 0.0}
    rep = quality_report(x, x)
    assert rep.to_dict() == {"correlational": 0.0, "mdd": 0.0, "acd": 0.0, "sd": 0.0, "kd": 0.0}


def test_tsg_negated_feature_flips_skew(rng):
    x = rng.exponential(size=(6, 12, 2))
    y = x.copy()
    y[..., 1] = -y[..., 1]
    flat = x[..., 1].ravel()
    c = flat - flat.mean()
    skew = (c**3).mean() / (c**2).mean() ** 1.5
    assert tsg_metrics(x, y)["sd"] == pytest.approx(2 * abs(skew) / 2, rel=1e-12)


def test_metrics_match_loop_oracles(rng):
    for _ in range(50):
        B1, B2 = rng.integers(2, 5, size=2)
        W, F = int(rng.integers(6, 10)), int(rng.integers(1, 4))
        real = rng.standard_normal((B1, W, F))
        synth = rng.standard_normal((B2, W, F)) * 1.5 + 0.3
        assert correlational_score(real, synth) == pytest.approx(correlational_loop(real, synth), abs=1e-12)
        got, want = tsg_metrics(real, synth), tsg_loop(real, synth)
        for k in want:
            assert got[k] == pytest.approx(want[k], abs=1e-12)
        xh = real + 0.1 * rng.standard_normal(real.shape)
        agg = aggregate_inversion_error(xh, real)
        for name, ref in zip(("time", "features", "time_signed", "features_signed"), inversion_error_loop(xh, real)):
            assert np.allclose(agg[name], ref, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_all_metrics_vanish_on_identical_inputs(seed):
    x = np.random.default_rng(seed).standard_normal((3, 7, 2))
    assert correlational_score(x, x) == 0.0
    assert all(v == 0.0 for v in tsg_metrics(x, x).values())
