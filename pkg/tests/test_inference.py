import math
import warnings

import numpy as np
import pytest
from conftest import random_design
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ivfr.errors import GridMismatchError, ValidationError
from ivfr.estimator import CoefficientCurves, GroupedDesign, compute_moments, ivfr_fit, unconstrained_fit
from ivfr.inference import (
    VarianceKernel,
    cluster_index,
    draw_multipliers,
    empirical_quantile_of_sup,
    multiplier_bootstrap,
    pointwise_band,
    sandwich_variance,
    score_matrix,
    uniform_contains_pointwise,
)
from ivfr.quantile_core import build_grid


def hand_design():
    g = build_grid(0.25, 0.75, 2)
    Y = np.array([[1.0, 2.0], [2.0, 4.0], [4.0, 5.0]])
    return GroupedDesign([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], Y, g)


def test_scores_by_hand():
    # Slope 3/2 at both levels, intercept (7/3, 11/3); residuals worked out by hand.
    d = hand_design()
    fit = unconstrained_fit(d)
    np.testing.assert_allclose(fit.values, [[7 / 3, 11 / 3], [1.5, 1.5]], atol=1e-14)
    sc = score_matrix(d, fit)
    np.testing.assert_allclose(sc.residuals, np.array([[1, -1], [-2, 2], [1, -1]]) / 6, atol=1e-14)
    np.testing.assert_allclose(sc.values[:, 0, :], np.array([[-4, -5], [-1, 1], [5, 4]]) / 3, atol=1e-14)
    np.testing.assert_allclose(sc.values[:, 1, :], np.array([[-1, 1], [0, 0], [1, -1]]) / 6, atol=1e-14)


def test_first_score_component_centered():
    rng = np.random.default_rng(0)
    d = random_design(rng)
    sc = score_matrix(d, unconstrained_fit(d))
    np.testing.assert_allclose(sc.values[:, 0, :].mean(axis=0), 0.0, atol=1e-12)


def test_exact_fit_gives_zero_slope_scores_and_zero_slope_variance():
    rng = np.random.default_rng(1)
    g = build_grid(0.05, 0.95, 7)
    X = rng.normal(size=(15, 1))
    Y = g.points + X @ g.points[None, :] ** 2
    d = GroupedDesign(X, X, Y, g)
    fit = unconstrained_fit(d)
    sc = score_matrix(d, fit)
    np.testing.assert_allclose(sc.values[:, 1:, :], 0.0, atol=1e-12)
    k = sandwich_variance(sc, compute_moments(d))
    np.testing.assert_allclose(k.omega_diag[:, 1:, 1:], 0.0, atol=1e-20)
    np.testing.assert_allclose(k.omega_diag[:, 0, 0], Y.var(axis=0), rtol=1e-12)


def test_score_grid_mismatch():
    rng = np.random.default_rng(2)
    d = random_design(rng, Q=7)
    other = CoefficientCurves(build_grid(0.1, 0.9, 7), np.zeros((d.p + 1, 7)), "unprojected", np.zeros(d.p))
    with pytest.raises(GridMismatchError):
        score_matrix(d, other)


def scalar_sandwich_oracle(d):
    """Direct loop evaluation of diag(1, S) J diag(1, S) for p = l = 1."""
    n = d.n
    x, z, Y = d.X[:, 0], d.Z[:, 0], d.Y
    xt, zt = x - x.mean(), z - z.mean()
    s = 1.0 / (np.sum(zt * xt) / n)
    b0 = Y.mean(axis=0)
    b1 = s * (zt @ Y) / n
    out = []
    for q in range(Y.shape[1]):
        J = np.zeros((2, 2))
        for j in range(n):
            phi = np.array([Y[j, q] - b0[q], zt[j] * (Y[j, q] - b0[q] - b1[q] * xt[j])])
            J += np.outer(phi, phi) / n
        a = np.diag([1.0, s])
        out.append(a @ J @ a.T)
    return np.array(out)


def test_sandwich_scalar_closed_form():
    rng = np.random.default_rng(3)
    d = random_design(rng, p=1, l=1)
    m = compute_moments(d)
    k = sandwich_variance(score_matrix(d, unconstrained_fit(d, m)), m)
    np.testing.assert_allclose(k.omega_diag, scalar_sandwich_oracle(d), rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sandwich_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    d = random_design(rng, weighted=bool(seed % 2))
    m = compute_moments(d)
    k = sandwich_variance(score_matrix(d, unconstrained_fit(d, m)), m)
    np.testing.assert_allclose(k.omega_diag, np.transpose(k.omega_diag, (0, 2, 1)), atol=1e-12)
    for om in k.omega_diag:
        assert np.linalg.eigvalsh(om).min() >= -1e-10 * max(1.0, np.abs(om).max())


def test_singleton_clusters_match_plain_sandwich():
    rng = np.random.default_rng(4)
    d = random_design(rng)
    m = compute_moments(d)
    sc = score_matrix(d, unconstrained_fit(d, m))
    a = sandwich_variance(sc, m)
    b = sandwich_variance(sc, m, cluster=np.arange(d.n)[::-1])
    np.testing.assert_allclose(a.omega_diag, b.omega_diag, rtol=1e-12)


def test_cluster_index_first_appearance():
    idx, G = cluster_index(["b", "a", "b", "c", "a"])
    assert G == 3
    np.testing.assert_array_equal(idx, [0, 1, 0, 2, 1])


def kernel(sigma, p1=2, Q=3):
    return VarianceKernel(np.zeros((Q, p1, p1)), np.full((p1, Q), float(sigma)))


def coeffs(Q=3):
    g = build_grid(0.25, 0.75, Q)
    return CoefficientCurves(g, np.arange(2.0 * Q).reshape(2, Q), "unprojected", [0.0])


def test_pointwise_half_width_one_sigma():
    alpha = 2 * stats.norm.sf(1.0)  # 0.3173...
    b = pointwise_band(coeffs(), kernel(1.0), alpha, 1)
    np.testing.assert_allclose(b.pointwise_upper - b.estimate, 1.0, rtol=1e-12)


def test_pointwise_half_width_oracle():
    b = pointwise_band(coeffs(), kernel(2.0), 0.05, 100)
    np.testing.assert_allclose(b.pointwise_upper - b.estimate, 0.3919928, atol=1e-7)
    np.testing.assert_allclose(b.estimate - b.pointwise_lower, 0.3919928, atol=1e-7)


def test_zero_sigma_collapses_band():
    b = pointwise_band(coeffs(), kernel(0.0), 0.05, 10)
    np.testing.assert_array_equal(b.pointwise_lower, b.estimate)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_alpha_range(alpha):
    with pytest.raises(ValidationError):
        pointwise_band(coeffs(), kernel(1.0), alpha, 10)


def test_sup_quantile_order_statistic():
    draws = np.array([1.0, 2.0, 3.0, 4.0])[:, None, None]
    assert empirical_quantile_of_sup(draws, np.ones((1, 1)), 0.25)[0] == 3.0


def test_sup_quantile_single_draw_and_constant():
    assert empirical_quantile_of_sup(np.full((1, 1, 4), -2.5), np.ones((1, 4)), 0.3)[0] == 2.5
    assert empirical_quantile_of_sup(np.full((9, 1, 4), 1.7), np.ones((1, 4)), 0.05)[0] == 1.7


def test_sup_quantile_excludes_zero_sigma(caplog):
    draws = np.array([[[1.0, 100.0]], [[2.0, 100.0]]])
    with caplog.at_level("WARNING"):
        c = empirical_quantile_of_sup(draws, np.array([[1.0, 0.0]]), 0.5)
    assert c[0] == 1.0 and "excluding" in caplog.text


def test_sup_quantile_empty():
    with pytest.raises(ValidationError):
        empirical_quantile_of_sup(np.zeros((0, 1, 3)), np.ones((1, 3)), 0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sup_quantile_monotone_in_level(seed):
    rng = np.random.default_rng(seed)
    draws = rng.normal(size=(int(rng.integers(1, 60)), 2, 5))
    sig = rng.uniform(0.5, 2, (2, 5))
    levels = np.sort(rng.uniform(0.01, 0.99, 6))
    cs = [empirical_quantile_of_sup(draws, sig, 1 - lv) for lv in levels]
    assert all(np.all(a <= b) for a, b in zip(cs[:-1], cs[1:]))


@pytest.fixture(scope="module")
def fit():
    rng = np.random.default_rng(5)
    return ivfr_fit(random_design(rng, n=40, p=1, l=1, Q=9, noise=1.5))


@pytest.mark.filterwarnings("ignore:B=.*below the recommended:RuntimeWarning")
def test_zero_multipliers_collapse(fit):
    for variant in ("unprojected", "projected"):
        draws, bands = multiplier_bootstrap(fit, 5, 0.05, variant, multipliers=np.zeros((5, fit.design.n)))
        np.testing.assert_allclose(draws.draws, 0.0, atol=1e-12)
        np.testing.assert_allclose(bands.critical_values, 0.0, atol=1e-9)
        np.testing.assert_allclose(bands.uniform_lower, bands.estimate, atol=1e-12)


def test_bootstrap_determinism_and_chunking(fit):
    a, _ = multiplier_bootstrap(fit, 120, seed=(3, 4), variant="projected", chunk=7)
    b, _ = multiplier_bootstrap(fit, 120, seed=(3, 4), variant="projected", chunk=64)
    np.testing.assert_allclose(a.draws, b.draws, rtol=0, atol=1e-12)
    a2, _ = multiplier_bootstrap(fit, 120, seed=(3, 4), variant="projected", chunk=7)
    assert np.array_equal(a.draws, a2.draws)
    c, _ = multiplier_bootstrap(fit, 120, seed=(3, 5), variant="projected")
    assert not np.array_equal(a.draws, c.draws)


def test_singleton_clusters_bit_exact(fit):
    a, ba = multiplier_bootstrap(fit, 150, seed=11)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        b, bb = multiplier_bootstrap(fit, 150, seed=11, cluster=np.arange(fit.design.n))
    assert np.array_equal(a.draws, b.draws)
    np.testing.assert_allclose(ba.uniform_upper, bb.uniform_upper, rtol=1e-12)


@pytest.mark.filterwarnings("ignore:B=.*below the recommended:RuntimeWarning")
def test_shared_cluster_multiplier(fit):
    n = fit.design.n
    cl = np.repeat(np.arange(n // 2), 2)
    om = np.zeros((3, n // 2))
    om[:, 0] = 1.0
    draws, _ = multiplier_bootstrap(fit, 3, cluster=cl, multipliers=om)
    expect, _ = multiplier_bootstrap(fit, 3, multipliers=np.pad(np.ones((3, 2)), ((0, 0), (0, n - 2))))
    np.testing.assert_allclose(draws.draws, expect.draws, atol=1e-12)


def test_few_clusters_and_small_B_warn(fit):
    with pytest.warns(RuntimeWarning):
        multiplier_bootstrap(fit, 10, seed=0)
    with pytest.warns(RuntimeWarning, match="clusters"):
        multiplier_bootstrap(fit, 100, seed=0, cluster=np.arange(fit.design.n) % 3)


def test_bootstrap_rejects_bad_inputs(fit):
    with pytest.raises(ValidationError):
        multiplier_bootstrap(fit, 0)
    with pytest.raises(ValidationError):
        multiplier_bootstrap(fit, 100, variant="other")
    with pytest.raises(ValidationError):
        multiplier_bootstrap(fit, 100, multipliers=np.zeros((3, 3)))


def test_projected_equals_unprojected_without_violations():
    rng = np.random.default_rng(6)
    g = build_grid(0.05, 0.95, 9)
    X = rng.normal(size=(40, 1))
    Y = 10 * g.points + X @ np.sqrt(g.points)[None, :] + 0.05 * rng.normal(size=(40, 1)) * g.points
    fit = ivfr_fit(GroupedDesign(X, X + 0.3 * rng.normal(size=(40, 1)), Y, g))
    a, _ = multiplier_bootstrap(fit, 200, seed=1, variant="unprojected")
    b, _ = multiplier_bootstrap(fit, 200, seed=1, variant="projected")
    np.testing.assert_allclose(a.draws, b.draws, atol=1e-12)


def test_draw_means_within_monte_carlo_error(fit):
    B = 2000
    draws, _ = multiplier_bootstrap(fit, B, seed=9)
    mean, sd = draws.draws.mean(axis=0), draws.draws.std(axis=0)
    assert np.all(np.abs(mean) <= 3 * sd / math.sqrt(B) + 1e-12) or np.mean(np.abs(mean) <= 3 * sd / math.sqrt(B)) > 0.98


def test_bootstrap_sd_matches_sandwich(fit):
    draws, bands = multiplier_bootstrap(fit, 4000, seed=2)
    m = fit.moments
    k = sandwich_variance(score_matrix(fit.design, fit.unprojected), m)
    np.testing.assert_allclose(draws.draws.std(axis=0), k.sigma, rtol=0.05)


def test_multipliers_are_standard_normal_per_draw():
    a = draw_multipliers((1, 2), 5, 10)
    assert np.array_equal(a, draw_multipliers((1, 2), 5, 10))
    assert not np.array_equal(a, draw_multipliers((1, 2), 6, 10))


def test_uniform_contains_pointwise_when_critical_value_large(fit):
    _, b = multiplier_bootstrap(fit, 300, seed=3)
    z = stats.norm.ppf(0.975)
    assert np.all(uniform_contains_pointwise(b) == (b.critical_values >= z))
    assert np.all(b.uniform_lower <= b.estimate) and np.all(b.estimate <= b.uniform_upper)
