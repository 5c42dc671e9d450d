import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from sgct import random_field as rf
from sgct.random_field import (
    CovarianceSpec,
    KLExpansion,
    cached_kl,
    compute_kl,
    covariance,
    eval_log_field,
    matern_bessel,
    matern_half_integer,
    trapezoid_weights,
)


def exponential_kernel_eigenvalues_1d(xi: float, count: int) -> np.ndarray:
    """Eigenvalues of exp(-|x - x'|/xi) on an interval of length 1.

    With c = 1/xi and half-length a = 1/2 the eigenvalues are 2c/(w^2 + c^2),
    where w solves c - w tan(w a) = 0 (even modes) or w + c tan(w a) = 0 (odd modes).
    """
    c, a = 1.0 / xi, 0.5
    roots = []
    for k in range(count):
        roots.append(brentq(lambda w: c * np.cos(w * a) - w * np.sin(w * a),
                            k * np.pi / a + 1e-12, (k + 0.5) * np.pi / a - 1e-12))
        roots.append(brentq(lambda w: w * np.cos(w * a) + c * np.sin(w * a),
                            (k + 0.5) * np.pi / a + 1e-12, (k + 1) * np.pi / a - 1e-12))
    w = np.array(roots)
    return np.sort(2 * c / (w**2 + c**2))[::-1]


# -- covariance -------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        CovarianceSpec(nu=0.5, xi=1.0, sigma2=1.0),
        CovarianceSpec(nu=2.5, xi=0.4, sigma2=2.0),
        CovarianceSpec(nu=1.3, xi=0.2, sigma2=0.7),
        CovarianceSpec(kind="gaussian", xi=0.5, sigma2=2.0),
        CovarianceSpec(kind="constant", sigma2=3.0),
    ],
)
def test_covariance_at_zero_is_variance(spec):
    assert covariance(spec, 0.0) == pytest.approx(spec.sigma2, rel=1e-14)


def test_exponential_example():
    assert covariance(CovarianceSpec(nu=0.5, xi=1.0, sigma2=1.0), 1.0) == pytest.approx(math.exp(-1), rel=1e-14)


def test_gaussian_example():
    spec = CovarianceSpec(kind="gaussian", xi=0.5, sigma2=2.0)
    assert covariance(spec, 0.5) == pytest.approx(2 * math.exp(-0.5), rel=1e-14)


@pytest.mark.parametrize("s", [0, 1, 2, 3, 4])
def test_half_integer_closed_form_matches_bessel(s):
    r = np.linspace(0.0, 3.0, 61)
    closed = matern_half_integer(r, s, 0.3, 1.7)
    bessel = matern_bessel(r, s + 0.5, 0.3, 1.7)
    np.testing.assert_allclose(closed, bessel, rtol=1e-10, atol=1e-300)


def test_known_half_integer_forms():
    r = np.linspace(0, 2, 11)
    xi = 0.4
    z3 = math.sqrt(3) * r / xi
    z5 = math.sqrt(5) * r / xi
    np.testing.assert_allclose(matern_half_integer(r, 1, xi, 1.0), (1 + z3) * np.exp(-z3), rtol=1e-13)
    np.testing.assert_allclose(
        matern_half_integer(r, 2, xi, 1.0), (1 + z5 + z5**2 / 3) * np.exp(-z5), rtol=1e-13
    )


def test_debye_branch_matches_bessel_where_both_finite():
    # nu = 60: kve is still finite, so the asymptotic branch can be checked directly
    z = np.linspace(1.0, 200.0, 40)
    exact = np.log(rf.kve(60.0, z)) - z
    np.testing.assert_allclose(rf._log_kv_debye(60.0, z), exact, atol=1e-6)


def test_large_order_approaches_gaussian():
    r = np.linspace(0, 1, 21)
    g = covariance(CovarianceSpec(kind="gaussian", xi=0.4, sigma2=1.0), r)
    m = covariance(CovarianceSpec(nu=400.0, xi=0.4, sigma2=1.0), r)
    np.testing.assert_allclose(m, g, atol=5e-3)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -0.1])
def test_covariance_rejects_bad_distance(bad):
    with pytest.raises(ValueError):
        covariance(CovarianceSpec(), bad)


@pytest.mark.parametrize("kwargs", [dict(nu=0.0), dict(nu=-1.0), dict(xi=0.0), dict(sigma2=-1.0),
                                    dict(kind="cauchy"), dict(distance="max")])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        CovarianceSpec(**kwargs)


def test_spec_dict_round_trip():
    for spec in (CovarianceSpec(), CovarianceSpec(kind="gaussian", xi=0.2), CovarianceSpec(nu=0.5, distance="one-norm")):
        assert CovarianceSpec.from_dict(spec.to_dict()) == spec
    assert CovarianceSpec.from_dict({"nu": "inf", "xi": 0.4}).kind == "gaussian"


@settings(max_examples=60, deadline=None)
@given(
    nu=st.sampled_from([0.5, 1.5, 2.5, 0.8, 3.2, math.inf]),
    xi=st.floats(0.05, 2.0),
    r1=st.floats(0.0, 5.0),
    r2=st.floats(0.0, 5.0),
)
def test_covariance_non_increasing(nu, xi, r1, r2):
    spec = CovarianceSpec(kind="gaussian", xi=xi) if nu == math.inf else CovarianceSpec(nu=nu, xi=xi)
    lo, hi = sorted((r1, r2))
    assert covariance(spec, hi) <= covariance(spec, lo) * (1 + 1e-12) + 1e-300
    assert 0 <= covariance(spec, hi) <= spec.sigma2 * (1 + 1e-12)


# -- KL expansion ---------------------------------------------------------------


def _gram(kl: KLExpansion) -> np.ndarray:
    w = trapezoid_weights(kl.n_side)
    return kl.modes.T @ (w[:, None] * kl.modes)


def test_trapezoid_weights_sum_to_area():
    assert trapezoid_weights(17).sum() == pytest.approx(1.0, abs=1e-14)


def test_constant_kernel_is_rank_one():
    kl = compute_kl(CovarianceSpec(kind="constant", sigma2=2.0), 17, 6)
    assert kl.eigenvalues[0] == pytest.approx(2.0, abs=1e-8)
    np.testing.assert_allclose(kl.eigenvalues[1:], 0.0, atol=1e-8)
    np.testing.assert_allclose(kl.modes[:, 0], 1.0, atol=1e-8)


def test_trace_identity():
    spec = CovarianceSpec(nu=2.5, xi=0.3, sigma2=2.0)
    n = 17
    kl = compute_kl(spec, n, n * n)
    # all pairs kept (no negative ones dropped) reproduce the trace exactly
    assert kl.eigenvalues.sum() == pytest.approx(spec.sigma2, rel=1e-8)


def test_partial_trace_bounded_by_variance():
    spec = CovarianceSpec(nu=2.5, xi=0.4, sigma2=2.0)
    kl = compute_kl(spec, 33, 100)
    assert 0.99 * spec.sigma2 < kl.eigenvalues.sum() <= spec.sigma2 * (1 + 1e-10)


def test_separable_exponential_matches_tan_root_oracle():
    xi = 0.4
    lam1 = exponential_kernel_eigenvalues_1d(xi, 5)
    expected = np.sort(np.outer(lam1, lam1).ravel())[::-1][:5]
    kl = compute_kl(CovarianceSpec(nu=0.5, xi=xi, sigma2=1.0, distance="one-norm"), 81, 10)
    np.testing.assert_allclose(kl.eigenvalues[:5], expected, rtol=1e-3)


@pytest.mark.parametrize("n,terms", [(33, 40), (65, 60)])  # dense and Lanczos paths
def test_orthonormal_and_sorted(n, terms):
    kl = compute_kl(CovarianceSpec(nu=2.5, xi=0.3), n, terms)
    assert np.all(np.diff(kl.eigenvalues) <= 0)
    assert np.all(kl.eigenvalues >= 0)
    np.testing.assert_allclose(_gram(kl), np.eye(terms), atol=1e-8)


def test_sign_convention():
    kl = compute_kl(CovarianceSpec(nu=1.5, xi=0.3), 33, 12)
    idx = np.argmax(np.abs(kl.modes), axis=0)
    assert np.all(kl.modes[idx, np.arange(12)] > 0)


def test_dense_and_lanczos_paths_agree(monkeypatch):
    spec = CovarianceSpec(nu=2.5, xi=0.3)
    dense = compute_kl(spec, 33, 15)
    monkeypatch.setattr(rf, "_DENSE_LIMIT", 10)
    lanczos = compute_kl(spec, 33, 15)
    np.testing.assert_allclose(lanczos.eigenvalues, dense.eigenvalues, rtol=1e-10)
    # the leading mode is simple; modes 2 and 3 form a degenerate pair (x <-> y symmetry),
    # so only the subspace they span is comparable
    np.testing.assert_allclose(lanczos.modes[:, 0], dense.modes[:, 0], atol=1e-7)
    w = trapezoid_weights(33)[:, None]
    proj = lambda m: m @ (m * w).T
    np.testing.assert_allclose(proj(lanczos.modes[:, 1:3]), proj(dense.modes[:, 1:3]), atol=1e-7)


def test_smoother_field_decays_faster():
    n = 129
    rough = compute_kl(CovarianceSpec(nu=2.5, xi=0.4), n, 100)
    smooth = compute_kl(CovarianceSpec(kind="gaussian", xi=0.4), n, 100)
    k = np.arange(19, 100)  # 1-based k in [20, 100]
    assert np.all(smooth.eigenvalues[k] <= rough.eigenvalues[k])


def test_compute_kl_argument_checks():
    with pytest.raises(ValueError):
        compute_kl(CovarianceSpec(), 8, 2)
    with pytest.raises(ValueError):
        compute_kl(CovarianceSpec(), 9, 82)


def test_compute_kl_fails_without_enough_nonnegative_pairs(monkeypatch):
    # an indefinite kernel: every eigenvalue but a few is negative
    monkeypatch.setattr(rf, "covariance", lambda spec, r: np.cos(40 * np.asarray(r)))
    with pytest.raises(RuntimeError, match="non-negative"):
        compute_kl(CovarianceSpec(), 9, 81)


def test_expansion_rejects_unsorted_eigenvalues():
    with pytest.raises(ValueError):
        KLExpansion(9, np.array([1.0, 2.0]), np.zeros((81, 2)), 0.0)


# -- log-field evaluation ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_kl():
    return compute_kl(CovarianceSpec(nu=2.5, xi=0.3), 17, 8, mean=3.0)


def test_zero_parameters_give_mean(small_kl):
    pts = np.random.default_rng(0).random((50, 2))
    np.testing.assert_allclose(eval_log_field(small_kl, pts, np.zeros(5)), 3.0, atol=1e-14)


def test_affine_in_single_parameter(small_kl):
    pts = np.random.default_rng(1).random((40, 2))
    v0 = eval_log_field(small_kl, pts, [0.0])
    v1 = eval_log_field(small_kl, pts, [1.0])
    for t in (-2.3, 0.4, 3.1):
        np.testing.assert_allclose(eval_log_field(small_kl, pts, [t]) - v0, t * (v1 - v0), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=4), st.integers(0, 4))
def test_padding_invariance_is_exact(y, pad):
    kl = _padding_kl()
    pts = np.array([[0.1, 0.2], [0.5, 0.5], [0.97, 0.03], [1.0, 1.0]])
    a = eval_log_field(kl, pts, y)
    b = eval_log_field(kl, pts, list(y) + [0.0] * pad)
    np.testing.assert_array_equal(a, b)


_PAD_KL = []


def _padding_kl():
    if not _PAD_KL:
        _PAD_KL.append(compute_kl(CovarianceSpec(nu=1.5, xi=0.3), 17, 8))
    return _PAD_KL[0]


def test_interpolation_reproduces_grid_values(small_kl):
    y = np.linspace(-1, 1, 8)
    pts = small_kl.grid_coords
    np.testing.assert_allclose(eval_log_field(small_kl, pts, y), small_kl.grid_values(y), atol=1e-13)


def test_field_evaluation_errors(small_kl):
    with pytest.raises(ValueError):
        eval_log_field(small_kl, [[0.5, 0.5]], np.ones(9))
    with pytest.raises(ValueError):
        eval_log_field(small_kl, [[1.2, 0.5]], [0.0])
    with pytest.raises(ValueError):
        eval_log_field(small_kl, [[0.5, -0.01]], [0.0])


def test_save_load_round_trip(tmp_path, small_kl):
    path = tmp_path / "kl.npz"
    small_kl.save(path)
    back = KLExpansion.load(path)
    np.testing.assert_array_equal(back.eigenvalues, small_kl.eigenvalues)
    np.testing.assert_array_equal(back.modes, small_kl.modes)
    np.testing.assert_array_equal(back.mean_field, small_kl.mean_field)
    assert back.spec == small_kl.spec


def test_cache_hit_skips_recomputation(tmp_path, monkeypatch):
    spec = CovarianceSpec(nu=2.5, xi=0.3)
    kl1, hit1 = cached_kl(tmp_path, spec, 17, 5)
    monkeypatch.setattr(rf, "compute_kl", lambda *a, **k: pytest.fail("recomputed despite cache"))
    kl2, hit2 = cached_kl(tmp_path, spec, 17, 5)
    assert (hit1, hit2) == (False, True)
    np.testing.assert_array_equal(kl1.modes, kl2.modes)
    monkeypatch.undo()
    _, hit3 = cached_kl(tmp_path, CovarianceSpec(nu=2.5, xi=0.31), 17, 5)
    assert not hit3
