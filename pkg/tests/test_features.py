"""Wavelet front-end: filterbank oracle, reconstruction, moments and streaming consistency."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bladderstream.errors import ValidationError
from bladderstream.features import (
    DEFAULT_RATIO_PAIRS, FEATURE_DIM, WINDOW, FeatureExtractor, NormStats, SampleBuffer,
    apply_norm, fit_norm, ilwt5, lwt5, ratio_features, retain_latest, trace_features,
    validate_pairs, window_features,
)

from oracles import G, H, filterbank_oracle, oracle_feature


def test_filter_taps_are_orthonormal_db4():
    assert np.sum(H) == pytest.approx(np.sqrt(2.0))
    assert np.sum(H ** 2) == pytest.approx(1.0)
    assert np.sum(G) == pytest.approx(0.0, abs=1e-15)
    # one vanishing moment beyond the mean: sum k*g_k == 0
    assert np.dot(np.arange(4), G) == pytest.approx(0.0, abs=1e-14)


def test_lifting_matches_filterbank_oracle_on_100_windows():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=rng.uniform(0.1, 50), size=WINDOW) + rng.uniform(-20, 40)
        coeffs = lwt5(x)
        approx, detail = filterbank_oracle(x)
        for lvl in range(5):
            worst = max(worst, np.max(np.abs(coeffs.approx[lvl] - approx[lvl])),
                        np.max(np.abs(coeffs.detail[lvl] - detail[lvl])))
    assert worst <= 1e-6


def test_subband_lengths():
    c = lwt5(np.zeros(WINDOW))
    assert [len(a) for a in c.approx] == [256, 128, 64, 32, 16]
    assert [len(d) for d in c.detail] == [256, 128, 64, 32, 16]


def test_perfect_reconstruction():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=WINDOW) * 10 + 3
        rel = np.linalg.norm(ilwt5(lwt5(x)) - x) / np.linalg.norm(x)
        assert rel <= 1e-9


def test_energy_preserved():
    x = np.random.default_rng(2).normal(size=WINDOW)
    c = lwt5(x)
    energy = np.sum(c.approx[-1] ** 2) + sum(np.sum(d ** 2) for d in c.detail)
    assert energy == pytest.approx(np.sum(x ** 2), rel=1e-12)


@pytest.mark.parametrize("level", range(5))
def test_constant_window_has_zero_details(level):
    c = lwt5(np.full(WINDOW, 17.5))
    assert np.max(np.abs(c.detail[level])) <= 1e-7
    # DC gain sqrt(2) per level
    assert np.allclose(c.approx[level], 17.5 * np.sqrt(2.0) ** (level + 1))


def wrap_free(level, n):
    """Indices of level-``level`` detail coefficients whose support avoids the periodic wrap."""
    lo = 1
    hi = n if level == 1 else n - 1
    return slice(lo, hi)


def test_linear_window_details_vanish_away_from_wrap():
    """Two vanishing moments: a ramp gives zero details except where the periodic wrap bites."""
    x = 0.3 * np.arange(WINDOW) - 40.0
    for lvl, d in enumerate(lwt5(x).detail, start=1):
        assert np.max(np.abs(d[wrap_free(lvl, len(d))])) <= 1e-7, lvl


def test_linear_window_wrap_coefficients_are_nonzero():
    """The ramp is discontinuous under periodic extension; the wrap-straddling details see the jump."""
    d = lwt5(np.arange(WINDOW, dtype=float)).detail
    assert abs(d[0][0]) > 1.0
    assert all(abs(d[k][-1]) > 1.0 for k in range(1, 5))
    assert abs(d[0][-1]) <= 1e-7


def test_linearity():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(2, WINDOW))
    cx, cy, cs = lwt5(x), lwt5(y), lwt5(2.5 * x - y)
    for a, b, s in zip(cx.detail + cx.approx, cy.detail + cy.approx, cs.detail + cs.approx):
        assert np.allclose(s, 2.5 * a - b, atol=1e-12)


def test_batched_transform_matches_single():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(3, WINDOW))
    batched = retain_latest(lwt5(X))
    for i in range(3):
        assert np.array_equal(batched[i], retain_latest(lwt5(X[i])))


def test_wrong_window_length_rejected():
    with pytest.raises(ValidationError):
        lwt5(np.zeros(100))


def test_retained_order_is_a5_to_d1():
    x = np.random.default_rng(5).normal(size=WINDOW)
    c = lwt5(x)
    r = retain_latest(c)
    assert r[0] == c.approx[4][-1] and r[4] == c.approx[0][-1]
    assert r[5] == c.detail[4][-1] and r[9] == c.detail[0][-1]


# ---------------------------------------------------------------- ratios / features

def test_ratio_clamp_preserves_sign():
    c = np.zeros(10)
    c[0], c[4] = 2.0, -1e-9
    r = ratio_features(c, [(0, 4), (0, 1), (0, 2), (0, 3), (0, 5)], eps=1e-6)
    assert r[0] == pytest.approx(-2e6)
    assert r[1] == pytest.approx(2e6)  # zero denominator clamps to +eps


def test_ratio_values_plain():
    c = np.arange(1.0, 11.0)
    r = ratio_features(c)
    expected = [c[i] / c[j] for i, j in DEFAULT_RATIO_PAIRS]
    assert np.allclose(r, expected)


@pytest.mark.parametrize("pairs", [[(0, 1)] * 4, [(0, 0)] * 5, [(0, 10)] * 5])
def test_invalid_pairs(pairs):
    with pytest.raises(ValidationError):
        validate_pairs(pairs)


def test_features_match_oracle_feature():
    rng = np.random.default_rng(12)
    for _ in range(5):
        w = rng.normal(5, 3, size=WINDOW)
        assert np.allclose(window_features(w), oracle_feature(w, DEFAULT_RATIO_PAIRS, 1e-6), rtol=1e-9, atol=1e-9)


def test_feature_layout():
    w = np.random.default_rng(6).normal(size=WINDOW)
    f = window_features(w)
    assert f.shape == (FEATURE_DIM,)
    assert f[0] == w[-1]
    assert np.array_equal(f[1:11], retain_latest(lwt5(w)))


def test_sample_buffer_fifo_and_padding():
    buf = SampleBuffer(4)
    for v in (1, 2, 3):
        buf.push(v)
    assert np.array_equal(buf.window(), [0, 1, 2, 3]) and not buf.full
    for v in (4, 5, 6):
        buf.push(v)
    assert np.array_equal(buf.window(), [3, 4, 5, 6]) and buf.full
    assert list(buf) == [3, 4, 5, 6]
    with pytest.raises(ValidationError):
        buf.push(float("nan"))
    buf.reset()
    assert len(buf) == 0 and not buf.window().any()


def test_streaming_extractor_matches_batched_trace_features():
    x = np.random.default_rng(7).normal(size=1500).cumsum()
    fx = FeatureExtractor()
    streamed = np.array([fx.push(v) for v in x])
    assert np.array_equal(streamed, trace_features(x))


def test_shift_consistency_after_warmup():
    """Once the FIFO is full, features depend only on the last 512 samples."""
    rng = np.random.default_rng(8)
    x = rng.normal(size=1200)
    a = trace_features(x)[-1]
    b = trace_features(x[-WINDOW:])[-1]
    assert np.array_equal(a, b)


def test_causality_prefix():
    x = np.random.default_rng(9).normal(size=900)
    full = trace_features(x)
    assert np.array_equal(full[:600], trace_features(x[:600]))


def test_reset_restores_initial_state():
    x = np.random.default_rng(10).normal(size=50)
    fx = FeatureExtractor()
    first = [fx.push(v) for v in x]
    fx.reset()
    second = [fx.push(v) for v in x]
    assert np.array_equal(first, second)


def test_non_finite_trace_rejected():
    with pytest.raises(ValidationError):
        trace_features([1.0, np.inf])


# ---------------------------------------------------------------- normalisation

def test_norm_fit_and_apply():
    F = np.random.default_rng(11).normal(3, 2, size=(500, FEATURE_DIM))
    F[:, 5] = 1.0  # constant column
    stats = fit_norm(F)
    Z = apply_norm(F, stats)
    assert np.allclose(Z.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(np.delete(Z.std(axis=0), 5), 1)
    assert stats.std[5] == 1e-8 and np.all(Z[:, 5] == 0)
    assert NormStats.from_dict(stats.to_dict()).mean.tolist() == stats.mean.tolist()


def test_norm_empty_rejected():
    with pytest.raises(ValidationError):
        fit_norm(np.zeros((0, FEATURE_DIM)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, WINDOW, elements=st.floats(-1e3, 1e3)))
def test_reconstruction_property(x):
    assert np.allclose(ilwt5(lwt5(x)), x, atol=1e-9 * max(1.0, np.abs(x).max()))
