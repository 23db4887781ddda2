import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from tsastat import autodiff as ad
from tsastat.features import (CANDIDATE_POOL, DIFFERENTIABLE, KURT_POOL, SKEW_POOL, DegenerateChannelError,
                              NonDifferentiableFeatureError, StatFeature as F, compute_feature, feature_node,
                              feature_set, parse_features, stat_distance, stat_loss_node)

from conftest import graph_grad_check

series = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(3, 40)),
                elements=st.floats(-50, 50, allow_nan=False, width=64))


def _spread_ok(x):
    return np.all(x.std(axis=-1) > 1e-3 * np.maximum(1, np.abs(x).max()))


@pytest.mark.parametrize("feature, ref", [
    (F.MEAN, lambda x: x.mean(-1)),
    (F.STD, lambda x: x.std(-1)),
    (F.SKEWNESS, lambda x: stats.skew(x, axis=-1)),
    (F.KURTOSIS, lambda x: stats.kurtosis(x, axis=-1)),
    (F.RMS, lambda x: np.sqrt((x ** 2).mean(-1))),
    (F.MEDIAN, lambda x: np.median(x, -1)),
    (F.IQR, lambda x: stats.iqr(x, axis=-1)),
])
def test_features_match_scipy(feature, ref):
    x = np.random.default_rng(0).standard_normal((4, 2, 50))
    np.testing.assert_allclose(compute_feature(x, feature), ref(x), rtol=1e-10, atol=1e-12)


def test_autocorrelation_lag_one():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    c = x - 2.5
    expected = (c[0, :-1] * c[0, 1:]).sum() / (c[0] ** 2).sum()
    assert compute_feature(x, F.AUTOCORRELATION)[0] == pytest.approx(expected)


def test_mode_is_midpoint_of_fullest_bin():
    x = np.array([[0.0, 0.1, 0.1, 0.1, 16.0]])
    # 16 bins of width 1 on [0, 16]; bin 0 holds four values
    assert compute_feature(x, F.MODE)[0] == pytest.approx(0.5)


def test_constant_channel_mode_and_degenerate_skew():
    x = np.full((1, 5), 2.0)
    assert compute_feature(x, F.MODE)[0] == 2.0
    with pytest.raises(DegenerateChannelError):
        compute_feature(x, F.SKEWNESS)


def test_short_series_is_degenerate():
    with pytest.raises(DegenerateChannelError):
        compute_feature(np.ones((1, 1)), F.STD)


def test_pools():
    assert SKEW_POOL == (F.MEAN, F.STD, F.SKEWNESS, F.RMS)
    assert KURT_POOL == (F.MEAN, F.STD, F.KURTOSIS, F.RMS)
    assert len(CANDIDATE_POOL) == 9
    assert set(SKEW_POOL) <= DIFFERENTIABLE


@pytest.mark.parametrize("spec, expected", [
    ("skew-pool", SKEW_POOL),
    ("kurt-pool", KURT_POOL),
    ("mean,std", (F.MEAN, F.STD)),
    (["skew", "kurt"], (F.SKEWNESS, F.KURTOSIS)),
])
def test_parse_features(spec, expected):
    assert parse_features(spec) == expected


def test_parse_features_rejects_unknown():
    with pytest.raises(ValueError):
        parse_features("entropy")


@given(series)
def test_rms_identity(x):
    mu = compute_feature(x, F.MEAN)
    sd = compute_feature(x, F.STD)
    rms = compute_feature(x, F.RMS)
    scale = max(1.0, float(np.max(rms)) ** 2)
    np.testing.assert_allclose(sd ** 2, rms ** 2 - mu ** 2, atol=1e-10 * scale)


@given(series, st.floats(-10, 10), st.floats(0.1, 10))
def test_shape_moments_are_affine_invariant(x, shift, scale):
    if not _spread_ok(x):
        return
    y = scale * x + shift
    for f in (F.SKEWNESS, F.KURTOSIS):
        np.testing.assert_allclose(compute_feature(y, f), compute_feature(x, f), rtol=1e-6, atol=1e-6)


@given(series)
def test_stat_distance_is_a_semimetric(x):
    if not _spread_ok(x):
        return
    assert stat_distance(x, x, SKEW_POOL) == 0.0
    y = x[::-1].copy() + 1.0
    assert stat_distance(x, y, SKEW_POOL) == pytest.approx(stat_distance(y, x, SKEW_POOL))


def test_stat_distance_batch_and_norms():
    r = np.random.default_rng(1)
    a = r.standard_normal((5, 3, 20))
    b = a * 1.1 + 0.2
    d_inf = stat_distance(a, b, ["mean"], norm="linf")
    d_l2 = stat_distance(a, b, ["mean"], norm="l2")
    assert d_inf.shape == (5,)
    np.testing.assert_allclose(d_inf, np.abs(a.mean(-1) - b.mean(-1)).max(-1))
    assert np.all(d_l2 >= d_inf - 1e-15)


def test_feature_set_returns_named_vectors():
    x = np.random.default_rng(2).standard_normal((2, 10))
    out = feature_set(x, "skew-pool")
    assert [v.feature for v in out] == list(SKEW_POOL)
    assert all(v.values.shape == (2,) for v in out)


def test_non_differentiable_feature_is_rejected_in_loss():
    g = ad.Graph()
    x = g.leaf("x")
    with pytest.raises(NonDifferentiableFeatureError):
        feature_node(x, F.MEDIAN)
    with pytest.raises(NonDifferentiableFeatureError):
        stat_loss_node(x, np.zeros((1, 5)), ["mode"])


@pytest.mark.parametrize("feature", sorted(DIFFERENTIABLE, key=lambda f: f.value))
def test_feature_nodes_match_numpy(feature):
    x = np.random.default_rng(3).standard_normal((2, 3, 16))
    g = ad.Graph()
    g.output("o", feature_node(g.constant(x), feature))
    np.testing.assert_allclose(g.forward()["o"], compute_feature(x, feature), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("norm", ["linf", "l2"])
@pytest.mark.parametrize("seed", range(3))
def test_stat_loss_gradient(norm, seed):
    r = np.random.default_rng(seed)
    ref = r.standard_normal((2, 12))
    x = ref + 0.3 * r.standard_normal((2, 12))
    ids = list(SKEW_POOL) + [F.KURTOSIS, F.IDENTITY]

    def build(g, L):
        return stat_loss_node(L["x"], ref, ids, norm)

    assert graph_grad_check(build, {"x": x}, ["x"]) <= 1e-4


def test_stat_loss_matches_stat_distance():
    r = np.random.default_rng(4)
    ref = r.standard_normal((3, 2, 12))
    x = ref * 1.2 - 0.1
    g = ad.Graph()
    g.output("o", stat_loss_node(g.constant(x), ref, SKEW_POOL))
    np.testing.assert_allclose(g.forward()["o"], stat_distance(x, ref, SKEW_POOL), rtol=1e-12)
