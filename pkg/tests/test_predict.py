import json
import time

import numpy as np
import pytest

from bgldown.services.basis_service import BasisSet, ResidualPair
from bgldown.services.bgl_service import fit
from bgldown.services.predict_service import (
    condition_omega2,
    downscale,
    downscale_month,
    gls_omega1,
    posterior_omega1,
    predict_coefficients,
    stage2_mean,
    write_downscaled,
)
from bgldown.services.synthetic_service import dense_conditional_oracle, dense_predictive_oracle
from bgldown.utils.errors import DimensionMismatch, MalformedInput, ModelMissing
from conftest import fine_field, make_model, orthonormal_columns, random_spd_blocks

SEASONS = ("summer", "autumn", "winter", "spring")


def test_condition_worked_example():
    model = make_model(np.ones((1, 1)), [[[2.0, -1.0], [-1.0, 2.0]]], [0.1, 0.1])
    coeffs = condition_omega2(np.array([1.0]), np.zeros((1, 1)), model)
    assert coeffs.omega2_mean[0] == pytest.approx(0.5)
    assert coeffs.omega2_var[0] == pytest.approx(0.5)


def test_independent_processes_predict_zero(rng):
    phi = orthonormal_columns(rng, 12, 3)
    q = np.array([np.diag([1.0, 2.0]), np.diag([0.5, 4.0]), np.diag([3.0, 1.0])])
    model = make_model(phi, q, [0.2, 0.3])
    mean, sd, _ = downscale_month(np.zeros(12), rng.standard_normal(12), model)
    np.testing.assert_allclose(mean, 0.0, atol=1e-14)
    np.testing.assert_allclose(sd ** 2, (phi ** 2) @ (1.0 / q[:, 1, 1]) + 0.3, rtol=1e-12)


def test_matches_dense_oracle(rng):
    for _ in range(10):
        npix, nlev = int(rng.integers(8, 25)), int(rng.integers(1, 6))
        phi = orthonormal_columns(rng, npix, nlev)
        q = random_spd_blocks(rng, nlev)
        tau2 = rng.uniform(0.05, 1.0, 2)
        model = make_model(phi, q, tau2)
        e1 = rng.standard_normal(npix)

        coeffs = predict_coefficients(e1, model)
        oracle_mean, oracle_cov = dense_conditional_oracle(phi, q, tau2, e1)
        np.testing.assert_allclose(coeffs.omega2_mean, oracle_mean, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(coeffs.omega2_cov, oracle_cov, rtol=1e-6, atol=1e-10)

        mean, sd, _ = downscale_month(np.zeros(npix), e1, model)
        pixel_mean, pixel_var = dense_predictive_oracle(phi, q, tau2, e1)
        np.testing.assert_allclose(mean, pixel_mean, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(sd ** 2, pixel_var, rtol=1e-6, atol=1e-10)


def test_gls_recovers_exact_coefficients(rng):
    phi = orthonormal_columns(rng, 15, 3)
    q = random_spd_blocks(rng, 3)
    model = make_model(phi, q, [0.5, 0.5])
    c = np.array([1.5, -0.7, 2.0])
    estimate, cov = gls_omega1(phi @ c, model)
    np.testing.assert_allclose(estimate, c, atol=1e-10)
    # orthonormal columns: Phi^T Sigma_1^-1 Phi = (V + tau1^2 I)^-1
    np.testing.assert_allclose(cov, np.diag(np.linalg.inv(q)[:, 0, 0] + 0.5), rtol=1e-9, atol=1e-12)


def test_gls_with_identity_covariance_is_projection(rng):
    phi = orthonormal_columns(rng, 12, 3)
    model = make_model(phi, np.array([1e12 * np.eye(2)] * 3), [1.0, 1.0])
    e1 = rng.standard_normal(12)
    estimate, _ = gls_omega1(e1, model)
    np.testing.assert_allclose(estimate, phi.T @ e1, atol=1e-9)


def test_gls_matches_dense_solve_with_general_basis(rng):
    phi = rng.standard_normal((30, 3))
    q = random_spd_blocks(rng, 3)
    model = make_model(phi, q, [0.4, 0.6])
    e1 = rng.standard_normal(30)
    sigma1 = phi @ np.diag(np.linalg.inv(q)[:, 0, 0]) @ phi.T + 0.4 * np.eye(30)
    info = phi.T @ np.linalg.solve(sigma1, phi)
    expected = np.linalg.solve(info, phi.T @ np.linalg.solve(sigma1, e1))
    estimate, cov = gls_omega1(e1, model)
    np.testing.assert_allclose(estimate, expected, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(cov, np.linalg.inv(info), rtol=1e-9, atol=1e-12)


def test_prediction_is_linear_in_e1(rng):
    phi = orthonormal_columns(rng, 10, 2)
    model = make_model(phi, random_spd_blocks(rng, 2), [0.3, 0.4])
    e, f = rng.standard_normal(10), rng.standard_normal(10)
    for mode in ("posterior", "gls"):
        combined = stage2_mean(2.0 * e - 3.0 * f, model, mode)
        np.testing.assert_allclose(combined, 2.0 * stage2_mean(e, model, mode) - 3.0 * stage2_mean(f, model, mode),
                                   atol=1e-12)


def test_posterior_variance_below_prior(rng):
    phi = orthonormal_columns(rng, 20, 4)
    q = random_spd_blocks(rng, 4)
    model = make_model(phi, q, [0.2, 0.2])
    coeffs = predict_coefficients(rng.standard_normal(20), model)
    prior = np.linalg.inv(q)[:, 1, 1]
    assert np.all(coeffs.omega2_var <= prior + 1e-12)
    _, cov1 = posterior_omega1(rng.standard_normal(20), model)
    assert np.all(np.diag(cov1) <= np.linalg.inv(q)[:, 0, 0] + 1e-12)


def test_predictive_sd_varies_over_pixels(rng):
    phi = orthonormal_columns(rng, 16, 3)
    model = make_model(phi, random_spd_blocks(rng, 3), [0.1, 0.1])
    _, sd, _ = downscale_month(np.zeros(16), rng.standard_normal(16), model)
    assert np.ptp(sd) > 1e-6
    _, sd_without, _ = downscale_month(np.zeros(16), rng.standard_normal(16), model, nugget=False)
    np.testing.assert_allclose(sd ** 2 - sd_without ** 2, 0.1, rtol=1e-10)


def test_bad_inputs(rng):
    model = make_model(orthonormal_columns(rng, 6, 2), random_spd_blocks(rng, 2), [0.1, 0.1])
    with pytest.raises(MalformedInput):
        predict_coefficients(np.zeros(6), model, "kriging")
    with pytest.raises(DimensionMismatch):
        predict_coefficients(np.zeros(5), model)


def _fields(rng, nmonths=12):
    trend = fine_field(rng.standard_normal((nmonths, 20)) + 15.0, 5, 4)
    w = fine_field(rng.standard_normal((nmonths, 20)), 5, 4)
    return trend, w


def _season_models(rng, seasons=SEASONS):
    phi = orthonormal_columns(rng, 20, 3)
    q = random_spd_blocks(rng, 3)
    w_mean = rng.standard_normal(20)
    return {season: make_model(phi, q, [0.2, 0.3], season, w_mean=w_mean) for season in seasons}


def test_downscale_matches_single_month(rng):
    trend, w = _fields(rng)
    models = _season_models(rng)
    result = downscale(trend, w, models)
    for t, month in enumerate(trend.time.entries):
        model = models[trend.time.season_of(month[1])]
        mean, sd, _ = downscale_month(trend.values[t], w.values[t] - model.w_mean, model)
        np.testing.assert_allclose(result.mean.values[t], mean)
        np.testing.assert_allclose(result.sd.values[t], sd)
    threaded = downscale(trend, w, models, threads=3)
    np.testing.assert_array_equal(threaded.mean.values, result.mean.values)


def test_missing_season_model(rng):
    trend, w = _fields(rng)
    with pytest.raises(ModelMissing):
        downscale(trend, w, _season_models(rng, ("summer",)))
    result = downscale(trend, w, _season_models(rng, ("summer",)), months=[(2000, 1), (2000, 12)])
    assert result.mean.time.entries == ((2000, 1), (2000, 12))


def test_write_downscaled(tmp_path, rng):
    trend, w = _fields(rng, nmonths=3)
    result = downscale(trend, w, _season_models(rng))
    written = write_downscaled(result, tmp_path / "predictions", {"config_digest": "abc"})
    assert len(written) == 6
    assert (tmp_path / "predictions" / "2000-02.sd.gsf").exists()
    sidecar = json.loads((tmp_path / "predictions" / "2000-03.json").read_text())
    assert sidecar["season"] == "autumn"
    assert sidecar["omega1_mode"] == "posterior"
    assert sidecar["config_digest"] == "abc"
    assert len(sidecar["omega2_var"]) == 3


@pytest.mark.slow
def test_large_grid_fit_and_predict_are_tractable(rng):
    npix, nlev, ntrain = 10_000, 50, 60
    phi = orthonormal_columns(rng, npix, nlev)
    chol = np.linalg.cholesky(np.linalg.inv(random_spd_blocks(rng, nlev)))
    omega = np.einsum("lij,tlj->tli", chol, rng.standard_normal((ntrain, nlev, 2)))
    e1 = omega[:, :, 0] @ phi.T + 0.3 * rng.standard_normal((ntrain, npix))
    e2 = omega[:, :, 1] @ phi.T + 0.3 * rng.standard_normal((ntrain, npix))
    basis = BasisSet(phi, np.zeros((npix, 0)), np.ones(nlev), nlev, "summer")

    started = time.perf_counter()
    model = fit(ResidualPair(e1, e2, "summer", w_mean=np.zeros(npix)), basis, 0.1, 0.0)
    assert time.perf_counter() - started < 300.0
    assert model.nlevels == nlev

    trend = fine_field(rng.standard_normal((100, npix)), 100, 100)
    w = fine_field(rng.standard_normal((100, npix)), 100, 100)
    started = time.perf_counter()
    result = downscale(trend, w, {season: model for season in SEASONS})
    assert time.perf_counter() - started < 60.0
    assert result.mean.values.shape == (100, npix)
