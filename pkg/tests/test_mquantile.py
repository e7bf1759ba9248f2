import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from linkage_sae.exceptions import InputError, NotFittedError
from linkage_sae.mquantile import (
    DEFAULT_GRID,
    MQGridFit,
    MQStar,
    fit_area_quantiles,
    fit_mq_grid,
    fit_mq_tau,
    monotone_quantiles,
    mq_coefficients,
    mse_mq_star,
    normal_equation_norm,
    predict_means_mq_star,
    psi_tau,
)

from conftest import make_sample


def test_default_grid():
    assert len(DEFAULT_GRID) == 49
    assert DEFAULT_GRID[0] == pytest.approx(0.02)
    assert DEFAULT_GRID[-1] == pytest.approx(0.98)


def test_psi_tau_tilt():
    r = np.array([-3.0, -0.5, 0.5, 3.0])
    np.testing.assert_allclose(psi_tau(r, 0.5, 1.345), np.clip(r, -1.345, 1.345))
    np.testing.assert_allclose(psi_tau(r, 0.8, 1.0), [-0.4, -0.2, 0.8, 1.6])


def test_median_order_without_clipping_is_ols(linked):
    s = linked.perfect_linkage()
    fit = fit_mq_tau(s, 0.5, c=1e8, tol=1e-12)
    ols = np.linalg.lstsq(s.X, s.y, rcond=None)[0]
    np.testing.assert_allclose(fit.beta, ols, rtol=1e-10)
    e = s.y - s.X @ ols
    assert fit.sigma2 == pytest.approx(np.mean(e**2), rel=1e-8)


def test_expectile_orders_without_clipping_solve_weighted_ls(linked):
    s = linked.perfect_linkage()
    tau = 0.8
    fit = fit_mq_tau(s, tau, c=1e8, tol=1e-12)
    e = s.y - s.X @ fit.beta
    w = np.where(e > 0, tau, 1 - tau)
    np.testing.assert_allclose(s.X.T @ (w * e), 0.0, atol=1e-8 * np.abs(s.y).sum())


def test_normal_equations_hold(linked):
    for tau in (0.02, 0.3, 0.5, 0.98):
        fit = fit_mq_tau(linked, tau)
        assert fit.equation_norm < 1e-8
        assert normal_equation_norm(linked, fit.beta, fit.upsilon, tau, 1.345) == fit.equation_norm


def test_extreme_orders_converge(study_sample):
    grid = fit_mq_grid(study_sample)
    assert grid.converged.all()


def test_fitted_quantiles_increase_with_order(linked):
    grid = fit_mq_grid(linked)
    Q = grid.index_function(linked.X)
    assert np.mean(np.diff(Q, axis=1) >= -1e-8) > 0.99


def test_grid_validation(linked):
    with pytest.raises(InputError):
        fit_mq_grid(linked, [0.5, 0.4])
    with pytest.raises(InputError):
        fit_mq_grid(linked, [0.0, 0.5])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-100, 100)))
def test_monotone_quantiles(Q):
    M = monotone_quantiles(Q)
    assert np.all(np.diff(M, axis=1) >= -1e-9)
    # already monotone rows are untouched
    ok = np.all(np.diff(Q, axis=1) >= 0, axis=1)
    np.testing.assert_array_equal(M[ok], Q[ok])
    # isotonic regression preserves row sums
    np.testing.assert_allclose(M.sum(axis=1), Q.sum(axis=1), atol=1e-8)


def _hand_grid(sample):
    # quantile surface x'beta_tau = 100 + 10 * (tau - 0.5) for every unit
    taus = np.array([0.1, 0.5, 0.9])
    betas = np.zeros((3, sample.p))
    betas[:, 0] = 100 + 10 * (taus - 0.5)
    return MQGridFit(taus, betas, np.ones(3), np.ones(3, dtype=bool))


def test_coefficient_hand_arithmetic(linked):
    s = linked.with_response(np.full(linked.n, 101.0))
    co = mq_coefficients(s, _hand_grid(s))
    # y = 101 sits at tau** = 0.6 for every unit
    np.testing.assert_allclose(co.tau_starstar, 0.6)
    lam, g, N = s.lam_unit, s.gamma_unit, s.N_unit
    np.testing.assert_allclose(co.tau_star, (lam - g) * 0.6 + g * N * 0.5)
    area_mean = np.bincount(s.area, weights=co.tau_star) / s.n_area
    np.testing.assert_allclose(co.tau_area, area_mean)
    assert not co.clamped.any()
    # exact centring with a constant tau** returns tau** unchanged
    exact = mq_coefficients(s, _hand_grid(s), correction="exact")
    np.testing.assert_allclose(exact.tau_star, 0.6)


def test_coefficients_clamp_outside_envelope(linked):
    y = np.full(linked.n, 101.0)
    y[0], y[1] = 50.0, 200.0
    s = linked.with_response(y)
    co = mq_coefficients(s, _hand_grid(s))
    assert co.tau_starstar[0] == pytest.approx(0.1)
    assert co.tau_starstar[1] == pytest.approx(0.9)
    assert co.clamped[:2].all() and not co.clamped[2:].any()
    with pytest.raises(InputError):
        mq_coefficients(s, _hand_grid(s), correction="bogus")


def test_perfect_linkage_coefficients_unchanged(linked):
    s = linked.perfect_linkage()
    co = mq_coefficients(s, fit_mq_grid(s))
    np.testing.assert_allclose(co.tau_star, co.tau_starstar)


def test_prediction_formula(linked):
    est = MQStar().fit(linked)
    s = linked
    fit = est.fit_
    expected = (
        s.n_area * s.ybar_s
        + (s.N_area - s.n_area) * np.einsum("ia,ia->i", s.xbar_r_star, fit.betas)
    ) / s.N_area
    np.testing.assert_allclose(est.predict(), expected)
    # each area is refitted at its own coefficient
    np.testing.assert_allclose(fit.tau, np.clip(est.coefficients_.tau_area, 0.02, 0.98))
    assert not fit.fallback.any()


def test_mse_components(linked):
    est = MQStar().fit(linked)
    table = est.mse()
    assert list(table.columns) == ["variance", "bias2", "v_tau", "mse"]
    assert (table >= 0).all().all()
    np.testing.assert_allclose(table["mse"], table[["variance", "bias2", "v_tau"]].sum(axis=1))


def test_census_sample_has_no_error():
    sample, _ = make_sample(D=3, N_i=100, n_i=100, seed=4)
    est = MQStar().fit(sample)
    np.testing.assert_allclose(est.predict(), sample.ybar_s)
    table = est.mse()
    np.testing.assert_allclose(table["variance"], 0.0, atol=1e-12)


def test_area_refit_matches_direct_fit(linked):
    grid = fit_mq_grid(linked)
    co = mq_coefficients(linked, grid)
    area = fit_area_quantiles(linked, grid, co)
    direct = fit_mq_tau(linked, area.tau[0])
    np.testing.assert_allclose(area.betas[0], direct.beta, rtol=1e-6)
    assert predict_means_mq_star(area).shape == (linked.n_areas,)
    assert mse_mq_star(area).shape[0] == linked.n_areas


def test_estimator_api(linked):
    est = MQStar()
    with pytest.raises(NotFittedError):
        est.predict()
    est.fit(linked)
    assert est.name == "*MQ"
    assert MQStar(correct_linkage=False).name == "MQ"
    frame = est.coefficient_frame()
    assert list(frame.columns) == ["area_id", "block_id", "tau_starstar", "tau_star", "clamped"]
    summary = est.summary()
    assert summary["grid_size"] == 49 and summary["grid_failures"] == 0


def test_custom_grid(linked):
    est = MQStar(taus=np.linspace(0.1, 0.9, 9)).fit(linked)
    assert len(est.grid_.taus) == 9
