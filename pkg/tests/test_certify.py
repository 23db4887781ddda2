import csv
import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.stats import binomtest, norm

from tsastat import certify as c
from tsastat.features import DegenerateChannelError


def threshold_clf(X):
    """Class 1 when the series mean is positive."""
    return (np.asarray(X).mean(axis=(1, 2)) > 0).astype(int)


def constant_clf(label):
    return lambda X: np.full(len(X), label)


prob_vectors = st.integers(2, 6).flatmap(
    lambda k: st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k)).map(lambda v: np.array(v) / np.sum(v))


# -- discrete divergence ---------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.3, 0.999, 1.5, 2.0, 10.0])
def test_renyi_identical_is_zero(alpha):
    P = np.array([0.2, 0.5, 0.3])
    assert c.renyi_discrete(P, P, alpha) == 0.0


def test_renyi_order_two_example():
    assert c.renyi_discrete([0.5, 0.5], [0.25, 0.75], 2) == pytest.approx(math.log(4 / 3), abs=1e-12)


@pytest.mark.parametrize("side", [1, -1])
def test_renyi_tends_to_kl(side):
    P = np.array([0.1, 0.6, 0.3])
    Q = np.array([0.3, 0.3, 0.4])
    kl = float(np.sum(P * np.log(P / Q)))
    assert abs(c.renyi_discrete(P, Q, 1 + side * 1e-7) - kl) < 1e-6


def test_renyi_missing_support():
    assert c.renyi_discrete([0.5, 0.5], [1.0, 0.0], 2.0) == math.inf
    assert math.isfinite(c.renyi_discrete([0.5, 0.5], [1.0, 0.0], 0.5))
    assert c.renyi_discrete([1.0, 0.0], [0.0, 1.0], 0.5) == math.inf


@pytest.mark.parametrize("P, Q, alpha", [
    ([0.5, 0.6], [0.5, 0.5], 2.0),
    ([-0.1, 1.1], [0.5, 0.5], 2.0),
    ([0.5, 0.5], [0.2, 0.3, 0.5], 2.0),
    ([0.5, 0.5], [0.5, 0.5], 1.0),
    ([0.5, 0.5], [0.5, 0.5], 0.0),
])
def test_renyi_rejects_bad_input(P, Q, alpha):
    with pytest.raises(ValueError):
        c.renyi_discrete(P, Q, alpha)


@given(prob_vectors, st.floats(0.05, 20.0))
def test_renyi_nonnegative(P, alpha):
    assume(abs(alpha - 1) > 1e-3)
    Q = np.roll(P, 1)
    d = c.renyi_discrete(P, Q, alpha)
    assert d >= 0
    if not np.allclose(P, Q, atol=1e-6):
        assert d > 0


@given(prob_vectors, st.floats(1.01, 5.0), st.floats(1.01, 5.0))
def test_renyi_nondecreasing_in_order(P, a, b):
    Q = np.roll(P, 1)
    lo, hi = sorted((a, b))
    assert c.renyi_discrete(P, Q, lo) <= c.renyi_discrete(P, Q, hi) + 1e-12


# -- Gaussian divergence ----------------------------------------------------------


@pytest.mark.parametrize("variant", list(c.Variant))
def test_gaussian_identical_is_zero(variant):
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert c.renyi_gaussian([1, 2], S, [1, 2], S, 3.0, variant) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_one_dimensional_forms():
    a, s2, d = 2.5, 0.7, 1.3
    inv = c.renyi_gaussian([d], [[s2]], [0.0], [[s2]], a, "InverseForm")
    lit = c.renyi_gaussian([d], [[s2]], [0.0], [[s2]], a, "PaperLiteral")
    assert inv == pytest.approx(a * d ** 2 / (2 * s2), rel=1e-12)
    assert lit == pytest.approx(a * s2 * d ** 2 / 2, rel=1e-12)


def test_gaussian_inverse_form_equal_covariance():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    d = np.array([0.4, -1.0])
    got = c.renyi_gaussian(d, S, [0, 0], S, 1.7, "InverseForm")
    assert got == pytest.approx(0.85 * d @ np.linalg.solve(S, d), rel=1e-12)


def test_gaussian_unequal_variances_use_swapped_weights():
    # quadrature reference for D_a(N(m1, s1^2) || N(m2, s2^2))
    a, m1, s1, m2, s2 = 1.5, 0.3, 1.2, -0.4, 0.9
    f = lambda x: norm.pdf(x, m1, s1) ** a * norm.pdf(x, m2, s2) ** (1 - a)  # noqa: E731
    xs = np.linspace(-15, 15, 200001)
    ref = math.log(np.trapezoid(f(xs), xs)) / (a - 1)
    v = a * s2 ** 2 + (1 - a) * s1 ** 2
    standard = a * (m1 - m2) ** 2 / (2 * v) - math.log(v / (s1 ** (2 * (1 - a)) * s2 ** (2 * a))) / (2 * (a - 1))
    assert standard == pytest.approx(ref, rel=1e-8)
    got = c.renyi_gaussian([m1], [[s1 ** 2]], [m2], [[s2 ** 2]], a, "InverseForm")
    assert abs(got - ref) > 0.1


def test_gaussian_monte_carlo_small():
    rng = np.random.default_rng(0)
    a, d, s2 = 2.0, 0.5, 1.0
    x = rng.normal(d, math.sqrt(s2), 200_000)
    # E_P[(p/q)^(a-1)] = exp((a-1) D_a)
    w = np.exp((a - 1) * (norm.logpdf(x, d, 1) - norm.logpdf(x, 0, 1)))
    est, se = w.mean(), w.std(ddof=1) / math.sqrt(len(w))
    expected = math.exp((a - 1) * c.renyi_gaussian([d], [[s2]], [0], [[s2]], a, "InverseForm"))
    assert abs(est - expected) <= 3 * se


def test_gaussian_singular_sigma_alpha():
    with pytest.raises(c.DegenerateCovarianceError):
        c.renyi_gaussian([0, 0], np.eye(2), [1, 0], np.zeros((2, 2)) + np.diag([1, 0]), 1.0 + 1e-9 + 1.0,
                         "InverseForm")
    with pytest.raises(ValueError):
        c.renyi_gaussian([0], [[1.0]], [0, 0], np.eye(2), 2.0)


# -- lemma and bound ----------------------------------------------------------------


@pytest.mark.parametrize("p, alpha", [(0.5, 2.0), (0.3, 1.5), (0.1, 40.0), (0.45, 0.5)])
def test_lemma3_tie_is_exactly_zero(p, alpha):
    assert c.lemma3_lower_bound(p, p, alpha) == 0.0


@pytest.mark.parametrize("p1, p2, alpha", [(0.8, 0.1, 2), (0.6, 0.3, 7.5), (0.95, 0.01, 1.01), (0.7, 0.2, 0.4)])
def test_lemma3_matches_high_precision(p1, p2, alpha):
    mpmath.mp.dps = 50
    P1, P2, A = mpmath.mpf(p1), mpmath.mpf(p2), mpmath.mpf(alpha)
    ref = -mpmath.log(1 - P1 - P2 + 2 * (0.5 * (P1 ** (1 - A) + P2 ** (1 - A))) ** (1 / (1 - A)))
    assert c.lemma3_lower_bound(p1, p2, alpha) == pytest.approx(float(ref), rel=1e-12)


def test_lemma3_limits():
    assert c.lemma3_lower_bound(0.7, 0.0, 3.0) == pytest.approx(-math.log(0.3), rel=1e-12)
    assert c.lemma3_lower_bound(1.0, 0.0, 2.0) == math.inf
    p1, p2 = 0.7, 0.2
    near_one = c.lemma3_lower_bound(p1, p2, 1 + 1e-8)
    assert near_one == pytest.approx(-math.log(1 - (math.sqrt(p1) - math.sqrt(p2)) ** 2), rel=1e-6)


@pytest.mark.parametrize("args", [(0.3, 0.5, 2.0), (0.8, 0.3, 2.0), (1.2, 0.0, 2.0), (0.6, 0.2, 1.0)])
def test_lemma3_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        c.lemma3_lower_bound(*args)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(1.001, 64.0))
def test_lemma3_nonnegative_above_one(u, v, alpha):
    p1 = max(u, v)
    p2 = min(u, v, 1 - p1)
    assert c.lemma3_lower_bound(p1, p2, alpha) >= 0


def test_theorem2_tie_is_zero():
    assert c.theorem2_bound(0.4, 0.4, np.eye(3)) == 0.0
    assert c.theorem2_bound_alpha(0.5, 0.5, [[1.0]]) == (0.0, None)


@pytest.mark.parametrize("scale", [0.01, 0.5, 3.0, 1e4])
def test_theorem2_scaling(scale):
    S = np.array([[1.0, 0.2], [0.2, 2.0]])
    d1 = c.theorem2_bound(0.85, 0.1, S)
    assert c.theorem2_bound(0.85, 0.1, scale * S) == pytest.approx(d1 / math.sqrt(scale), rel=1e-10)


def test_theorem2_dense_grid_example():
    d, a_star = c.theorem2_bound_alpha(0.9, 0.05, np.eye(2))
    grid = np.geomspace(c.ALPHA_MIN, c.ALPHA_MAX, 100_000)
    dense = math.sqrt(max(c.theorem2_maximand(0.9, 0.05, 2.0, a) for a in grid))
    assert d == pytest.approx(dense, rel=1e-6)
    assert c.ALPHA_MIN <= a_star <= c.ALPHA_MAX


def test_theorem2_monotone_in_p1():
    for p2 in (0.0, 0.05, 0.2):
        ds = [c.theorem2_bound(p1, p2, [[1.0]]) for p1 in np.linspace(max(p2, 0.3), 1 - p2 - 1e-6, 25)]
        assert all(b >= a - 1e-12 for a, b in zip(ds, ds[1:]))


def test_theorem2_degenerate_covariance():
    with pytest.raises(c.DegenerateCovarianceError):
        c.theorem2_bound(0.9, 0.05, np.array([[1.0, -1.0], [-1.0, 1.0]]))


# -- noise ----------------------------------------------------------------------------


def test_noise_spec_validation():
    with pytest.raises(c.DegenerateCovarianceError):
        c.NoiseSpec([0, 0], [[1, 0.5], [0.2, 1]])
    with pytest.raises(c.DegenerateCovarianceError):
        c.NoiseSpec([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError):
        c.NoiseSpec([0], np.eye(2))
    ns = c.NoiseSpec([0.1, 0.2], [[1, 0.5], [0.5, 2]])
    assert ns.sigma_sum == 4.0
    np.testing.assert_array_equal(ns.sigma_diag, [1, 2])


def test_noise_moments_and_common_random_numbers():
    S = c.gen_spd_covariance(3, 0.5, seed=1)
    ns = c.NoiseSpec([0.1, -0.2, 0.3], S)
    nP, n0 = ns.sample(np.random.default_rng(0), 4000, 25)
    assert nP.shape == (4000, 3, 25)
    np.testing.assert_allclose(nP - ns.mu_P[:, None], n0, atol=1e-15)
    flat = np.moveaxis(n0, 1, -1).reshape(-1, 3)
    np.testing.assert_allclose(np.cov(flat.T), S, atol=0.02)
    ind = c.NoiseSpec(ns.mu_P, S, common_random_numbers=False)
    nP2, n02 = ind.sample(np.random.default_rng(0), 10, 5)
    assert not np.allclose(nP2 - ind.mu_P[:, None], n02)


def test_gen_spd_covariance():
    assert c.gen_spd_covariance(1, 0.3).tolist() == [[0.3]]
    for n in (2, 5, 9):
        S = c.gen_spd_covariance(n, 0.7, seed=n)
        np.testing.assert_allclose(np.diag(S), 0.7, atol=1e-12)
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-10
        np.testing.assert_array_equal(S, c.gen_spd_covariance(n, 0.7, seed=n))
    np.testing.assert_array_equal(c.gen_spd_covariance(3, 2.0, diagonal=True), 2 * np.eye(3))
    with pytest.raises(ValueError):
        c.gen_spd_covariance(0, 1.0)


# -- certification -----------------------------------------------------------------------


def test_constant_classifier_is_certified_trivially():
    ns = c.NoiseSpec([0.3, -0.7], np.eye(2), sample_count=600)
    r = c.certify(constant_clf(2), np.zeros((2, 8)), ns, label_count=4)
    assert r.verdict is c.Verdict.CERTIFIED_TRIVIALLY
    assert r.delta == 0.7 and r.predicted_label == 2
    np.testing.assert_array_equal(r.EP, [0, 0, 1, 0])
    np.testing.assert_array_equal(r.E0, r.EP)


def test_shift_across_threshold_is_declined():
    ns = c.NoiseSpec([10.0], [[1.0]], sample_count=1000)
    r = c.certify(threshold_clf, np.full((1, 1), -3.0), ns, label_count=2)
    # P(mean + noise > 0) = Phi(7) under the shifted noise, Phi(-3) without it
    assert r.verdict is c.Verdict.DECLINED
    assert r.delta == 0.0 and r.EP.argmax() != r.E0.argmax()


@pytest.mark.parametrize("m, mu", [(-1.0, 0.2), (0.4, 0.1), (1.2, -0.3)])
def test_empirical_probabilities_match_gaussian(m, mu):
    ns = c.NoiseSpec([mu], [[1.0]], sample_count=5000)
    r = c.certify(threshold_clf, np.full((1, 1), m), ns, seed=3, label_count=2)
    for counts, shift in ((r.counts_P, mu), (r.counts_0, 0.0)):
        ci = binomtest(int(counts[1]), 5000).proportion_ci(0.99)
        assert ci.low <= norm.cdf(m + shift) <= ci.high
    assert r.EP.sum() == 1.0 and r.E0.sum() == 1.0


def test_delta_nonincreasing_in_sigma():
    deltas = []
    for s in (0.25, 0.5, 1.0, 2.0, 4.0):
        ns = c.NoiseSpec([0.0], [[s]], sample_count=5000)
        deltas.append(c.certify(threshold_clf, np.full((1, 1), 1.0), ns, seed=0, label_count=2).delta)
    assert all(b <= a for a, b in zip(deltas, deltas[1:]))


def test_determinism_and_worker_invariance():
    ns = c.NoiseSpec([0.1], [[0.5]], sample_count=2100)
    x = np.full((1, 3), 0.4)
    a = c.certify(threshold_clf, x, ns, seed=11, label_count=2)
    b = c.certify(threshold_clf, x, ns, seed=11, label_count=2, workers=3)
    assert a.to_json() == b.to_json()
    assert c.certify(threshold_clf, x, ns, seed=12, label_count=2).to_json() != a.to_json()


def test_certify_accepts_networks(small_net, cbf_small):
    X, _ = cbf_small.arrays("test")
    ns = c.NoiseSpec([0.05], [[0.05]], sample_count=500)
    r = c.certify(small_net, X[0], ns)
    assert len(r.EP) == 3 and r.samples_used == 500
    with pytest.raises(ValueError, match="shape"):
        c.certify(small_net, X[0], c.NoiseSpec([0, 0], np.eye(2)))


def test_report_json_round_trip():
    ns = c.NoiseSpec([0.2], [[1.0]], sample_count=800)
    r = c.certify(threshold_clf, np.full((1, 1), 0.5), ns, label_count=2, instance_id=4)
    d = json.loads(r.to_json())
    assert d["format"] == "tsastat-cert-v1"
    back = c.CertificationReport.from_dict(d)
    assert back.to_json() == r.to_json()


def test_batch_csv_and_curve(tmp_path):
    X = np.array([[[-2.0]], [[-0.2]], [[0.3]], [[2.5]]])
    y = np.array([0, 1, 1, 1])
    ns = c.NoiseSpec([0.1], [[0.5]], sample_count=1000)
    reps = c.certify_batch(threshold_clf, X, ns, seed=5, label_count=2)
    path = c.write_cert_csv(reps, tmp_path / "cert.csv")
    rows = list(csv.DictReader(open(path)))
    assert [int(r["instance_id"]) for r in rows] == [0, 1, 2, 3]
    assert [float(r["delta"]) for r in rows] == [r.delta for r in reps]
    grid = np.linspace(0, 3, 31)
    curve = c.certification_curve(reps, y, grid)
    assert np.all(np.diff(curve[:, 1]) <= 0)
    ok = [r.certified and r.predicted_label == t for r, t in zip(reps, y)]
    assert curve[0, 1] == np.mean(ok)


def test_constant_classifier_curve_is_flat_then_zero():
    ns = c.NoiseSpec([0.4], [[1.0]], sample_count=300)
    X = np.zeros((6, 1, 4))
    y = np.array([1, 1, 0, 1, 0, 1])
    reps = c.certify_batch(constant_clf(1), X, ns, label_count=2)
    curve = c.certification_curve(reps, y, [0.0, 0.2, 0.4, 0.41])
    np.testing.assert_allclose(curve[:, 1], [4 / 6, 4 / 6, 4 / 6, 0.0])


# -- soundness on the analytic classifier ---------------------------------------------------


def _majority(m):
    return int(m > 0)


@pytest.mark.parametrize("centre", np.linspace(-3, 3, 61))
def test_bound_sound_with_exact_probabilities(centre):
    # majority vote of 1{z > 0} under N(centre, 1) flips exactly at |centre|
    p1 = norm.cdf(abs(centre))
    assert c.theorem2_bound(p1, 1 - p1, [[1.0]]) <= abs(centre) + 1e-12


@pytest.mark.parametrize("m", [-2.0, -0.8, 0.6, 1.8])
@pytest.mark.parametrize("mu", [0.0, 0.1, 0.5])
def test_bound_holds_around_noise_centre(m, mu):
    # centres stay away from 0 so sampling error in EP cannot flip the check
    ns = c.NoiseSpec([mu], [[1.0]], sample_count=5000)
    r = c.certify(threshold_clf, np.full((1, 1), m), ns, seed=2, label_count=2)
    assert r.certified
    for s in np.linspace(-0.999 * r.delta, 0.999 * r.delta, 801):
        assert _majority(m + mu + s) == r.predicted_label


def test_shift_around_input_can_break_with_nonzero_mean():
    # x = 0.3 with mu_P = 0.5 certifies delta ~ 0.67 > 0.3, yet x - 0.31 flips the prediction
    ns = c.NoiseSpec([0.5], [[1.0]], sample_count=5000)
    r = c.certify(threshold_clf, np.full((1, 1), 0.3), ns, seed=1, label_count=2)
    assert r.certified and r.delta > 0.31
    assert _majority(0.3 - 0.31) != r.predicted_label


def test_tiled_noise_overcertifies_long_series():
    # each step gets independent noise, so the channel mean has variance 1/T, not 1
    T, m = 64, 0.25
    ns = c.NoiseSpec([0.0], [[1.0]], sample_count=5000)
    r = c.certify(threshold_clf, np.full((1, T), m), ns, seed=0, label_count=2)
    assert r.certified and r.delta > m


# -- bound conversions -------------------------------------------------------------------


def test_convert_bounds_zero_delta():
    x = np.array([[0.0, 1.0, 2.0, 3.0]])
    b = c.convert_bounds(0.0, x)
    assert b["rms_literal"] == pytest.approx(x.var())
    assert b["rms_sqrt"] == pytest.approx(x.std())


@pytest.mark.parametrize("delta", [0.0, 0.1, 0.5, 2.0])
def test_convert_bounds_match_grid_on_small_series(delta):
    x = np.array([[0.0, 1.0, 2.0, 3.0]])
    exact = c.convert_bounds(delta, x)
    grid = c.convert_bounds(delta, x, grid_points=10_001)
    for k in ("skewness", "kurtosis"):
        assert exact[k] == pytest.approx(grid[k], rel=1e-9)
    assert exact["skewness"] >= exact["skewness_literal"] - 1e-12


def test_convert_bounds_degenerate_channel():
    with pytest.raises(DegenerateChannelError):
        c.convert_bounds(0.1, np.ones((1, 5)))
    with pytest.raises(ValueError):
        c.convert_bounds(-1.0, np.arange(4.0)[None])
