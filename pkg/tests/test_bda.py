import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exprmap._binio import FormatError, FormatVersionError
from exprmap.bda import (AffineAlignment, AlignmentError, alignment_from_bytes, alignment_mse, alignment_to_bytes,
                         apply_bda, fit_bda, load_alignment, save_alignment)
from exprmap.dataset import BlendshapeFrame, coeff_matrix, synth_vr_pairs

unit = st.floats(0, 1, allow_nan=False)


def _design(rng, n=2000):
    return rng.uniform(0, 1, (n, 51))


def test_self_pairs_identity(small_pairs):
    frames = [s.frame for s in small_pairs]
    al = fit_bda([(f, f) for f in frames])
    X = coeff_matrix(frames)
    np.testing.assert_allclose(al.transform(X, clamp=False), X, atol=1e-6)
    assert al.fit_stats["train_mse"] < 1e-10


def test_exact_affine_recovery(rng):
    X = _design(rng)
    W = rng.normal(0, 0.3, (51, 51))
    b = rng.normal(0, 0.1, 51)
    al = fit_bda((X, X @ W.T + b))
    assert np.max(np.abs(al.W - W)) < 1e-6
    assert np.max(np.abs(al.b - b)) < 1e-6


def test_noise_residual_variance(rng):
    sigma = 0.01
    X = _design(rng, 20_000)
    W = np.eye(51) + rng.normal(0, 0.05, (51, 51))
    Y = X @ W.T + 0.02 + rng.normal(0, sigma, (20_000, 51))
    mse = fit_bda((X, Y)).fit_stats["train_mse"]
    assert 0.8 * sigma ** 2 <= mse <= 1.2 * sigma ** 2


def test_recovers_headset_remap(small_pairs):
    pairs, D = synth_vr_pairs(small_pairs, 11, sigma=0.0)
    al = fit_bda(pairs)
    np.testing.assert_allclose(np.diag(al.W), 1.0 / D, atol=1e-6)
    for vr, mp in pairs[:20]:
        np.testing.assert_allclose(apply_bda(al, vr).coeffs, mp.coeffs, atol=1e-6)


def test_noisy_remap_reproduces_within_noise(small_pairs):
    pairs, D = synth_vr_pairs(small_pairs, 11, sigma=0.01)
    al = fit_bda(pairs)
    err = np.array([apply_bda(al, vr).coeffs - mp.coeffs for vr, mp in pairs])
    # input noise is amplified by 1/D, at most 2x
    assert np.sqrt(np.mean(err ** 2)) < 2 * 0.01


def test_too_few_pairs(small_pairs):
    frames = [s.frame for s in small_pairs[:51]]
    with pytest.raises(AlignmentError):
        fit_bda([(f, f) for f in frames])


def test_non_finite_input(rng):
    X = _design(rng, 100)
    Y = X.copy()
    Y[3, 4] = np.nan
    with pytest.raises(AlignmentError):
        fit_bda((X, Y))


def test_apply_identity_and_clamp():
    f = BlendshapeFrame("s", 3, 99, np.full(51, 0.75))
    out = apply_bda(AffineAlignment.identity(), f)
    np.testing.assert_array_equal(out.coeffs, f.coeffs)
    assert (out.subject_id, out.frame_id, out.timestamp_us) == ("s", 3, 99)
    out = apply_bda(AffineAlignment(2 * np.eye(51), np.zeros(51)), f)
    np.testing.assert_array_equal(out.coeffs, np.ones(51))


def test_non_finite_alignment():
    W = np.eye(51)
    W[0, 0] = np.inf
    with pytest.raises(AlignmentError):
        AffineAlignment(W, np.zeros(51))


def test_optimality(rng):
    X = _design(rng, 500)
    Y = np.clip(X * 0.8 + rng.normal(0, 0.02, X.shape), 0, 1)
    al = fit_bda((X, Y))
    base = alignment_mse(al.W, al.b, X, Y)
    for _ in range(20):
        i, j = rng.integers(0, 51, 2)
        for d in (1e-3, -1e-3):
            W = al.W.copy()
            W[i, j] += d
            assert alignment_mse(W, al.b, X, Y) >= base
            b = al.b.copy()
            b[i] += d
            assert alignment_mse(al.W, b, X, Y) >= base


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 51, elements=unit), arrays(np.float64, 51, elements=unit), unit)
def test_linearity_before_clamp(x, y, a):
    rng = np.random.default_rng(0)
    al = AffineAlignment(rng.normal(size=(51, 51)), rng.normal(size=51))
    lhs = al.transform(a * x + (1 - a) * y, clamp=False)
    rhs = a * al.transform(x, clamp=False) + (1 - a) * al.transform(y, clamp=False)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_save_load_round_trip(tmp_path, rng):
    X = _design(rng, 200)
    al = fit_bda((X, X * 0.5 + 0.1))
    p = tmp_path / "a.bda"
    save_alignment(al, p)
    back = load_alignment(p)
    assert back.W.tobytes() == al.W.tobytes() and back.b.tobytes() == al.b.tobytes()
    assert back.fit_stats == al.fit_stats


def test_truncated_and_future_version():
    buf = alignment_to_bytes(AffineAlignment.identity())
    with pytest.raises(FormatError):
        alignment_from_bytes(buf[:-3])
    with pytest.raises(FormatError):
        alignment_from_bytes(buf + b"\0")
    with pytest.raises(FormatVersionError):
        alignment_from_bytes(b"BDA2" + buf[4:])


def test_apply_timing():
    al = AffineAlignment.identity()
    f = BlendshapeFrame("s", 0, 0, np.full(51, 0.3))
    times = np.empty(2000)
    for i in range(times.size):
        t = time.perf_counter()
        apply_bda(al, f)
        times[i] = time.perf_counter() - t
    assert np.median(times) < 1e-3
