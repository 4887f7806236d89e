import logging

import numpy as np
import pytest

from bgldown.services.basis_service import (
    BasisSet,
    ResidualPair,
    SplitRule,
    build_residuals,
    compute_eofs,
    fit_deterministic,
    read_basis,
    split_basis,
    write_basis,
)
from bgldown.services.gridded_io import GridSpec
from bgldown.utils.errors import InsufficientData, InvalidRule
from conftest import fine_field, orthonormal_columns


def spectrum_basis(singular_values, npix=10):
    cols = np.eye(npix)[:, :len(singular_values)]
    return BasisSet(cols, np.zeros((npix, 0)), np.asarray(singular_values, dtype=float), len(singular_values))


def test_rank_one_residuals(rng):
    pattern = rng.standard_normal(30)
    amplitudes = rng.standard_normal(8)
    amplitudes -= amplitudes.mean()
    e2 = np.outer(amplitudes, pattern)
    basis = compute_eofs(ResidualPair(np.zeros_like(e2), e2, "summer"))
    assert basis.rank == 1
    unit = pattern / np.linalg.norm(pattern)
    assert abs(abs(basis.phi[:, 0] @ unit) - 1.0) < 1e-12
    np.testing.assert_allclose(basis.singular_values[1:], 0.0)
    assert basis.phi.shape == (30, 8)


def test_eofs_are_orthonormal(rng):
    e2 = rng.standard_normal((12, 40))
    basis = compute_eofs(ResidualPair(rng.standard_normal((12, 40)), e2, "winter"))
    np.testing.assert_allclose(basis.phi.T @ basis.phi, np.eye(12), atol=1e-12)
    for source in ("obs", "pooled"):
        pooled = compute_eofs(ResidualPair(rng.standard_normal((12, 40)), e2, "winter"), source)
        np.testing.assert_allclose(pooled.phi.T @ pooled.phi, np.eye(12), atol=1e-12)


def test_variance_explained_matches_covariance_eigenvalues(rng):
    e2 = rng.standard_normal((10, 20)) @ np.diag(np.linspace(3.0, 0.2, 20))
    basis = compute_eofs(ResidualPair(np.zeros_like(e2), e2, "autumn"))
    centred = e2 - e2.mean(axis=0)
    eigenvalues = np.sort(np.linalg.eigvalsh(centred.T @ centred / 10))[::-1][:10]
    np.testing.assert_allclose(basis.variance_explained(), eigenvalues / eigenvalues.sum(), atol=1e-9)


def test_reconstruction_from_all_eofs(rng):
    e2 = rng.standard_normal((9, 25))
    basis = compute_eofs(ResidualPair(np.zeros_like(e2), e2, "spring"))
    centred = e2 - e2.mean(axis=0)
    rebuilt = centred @ basis.phi @ basis.phi.T
    assert np.linalg.norm(rebuilt - centred) / np.linalg.norm(centred) < 1e-8


def test_eofs_need_enough_data(rng):
    with pytest.raises(InsufficientData):
        compute_eofs(ResidualPair(np.zeros((1, 5)), np.zeros((1, 5)), "summer"))
    with pytest.raises(InsufficientData):
        compute_eofs(ResidualPair(np.zeros((6, 5)), rng.standard_normal((6, 5)), "summer"))


def test_completion_follows_seed(rng):
    e2 = rng.standard_normal((12, 40))
    pair = ResidualPair(np.zeros_like(e2), e2, "winter")
    first, again, other = compute_eofs(pair, seed=1), compute_eofs(pair, seed=1), compute_eofs(pair, seed=2)
    assert first.rank == 11
    np.testing.assert_array_equal(first.phi, again.phi)
    np.testing.assert_array_equal(first.phi[:, :11], other.phi[:, :11])
    assert not np.allclose(np.abs(first.phi[:, 11]), np.abs(other.phi[:, 11]))


def test_centring_rank_loss_logged_at_debug(rng, caplog):
    e2 = rng.standard_normal((12, 40))
    with caplog.at_level(logging.INFO, logger="bgldown.services.basis_service"):
        compute_eofs(ResidualPair(np.zeros_like(e2), e2, "winter"))
    assert not caplog.records

    amplitudes = rng.standard_normal(12)
    low_rank = np.outer(amplitudes - amplitudes.mean(), rng.standard_normal(40))
    with caplog.at_level(logging.INFO, logger="bgldown.services.basis_service"):
        compute_eofs(ResidualPair(np.zeros_like(low_rank), low_rank, "winter"))
    assert any("rank 1" in record.getMessage() for record in caplog.records)


def test_fixed_split_keeps_all_columns():
    full = spectrum_basis([4.0, 3.0, 2.0, 1.0])
    split = split_basis(full, SplitRule.fixed(4))
    assert split.nstoch == 4 and split.psi.shape[1] == 0
    split = split_basis(full, SplitRule.fixed(1))
    np.testing.assert_array_equal(split.full, full.full)


def test_variance_threshold_split():
    full = spectrum_basis(np.sqrt([5.0, 3.0, 1.0, 1.0]))
    assert split_basis(full, SplitRule.variance(0.9)).nstoch == 3
    assert split_basis(full, SplitRule.variance(0.5)).nstoch == 1


def test_full_variance_keeps_nonzero_columns():
    full = spectrum_basis([3.0, 2.0, 1.0, 0.0, 0.0])
    assert split_basis(full, SplitRule.variance(1.0)).nstoch == 3


@pytest.mark.parametrize("rule", [SplitRule.fixed(0), SplitRule.fixed(5), SplitRule.variance(0.0),
                                  SplitRule.variance(1.2), SplitRule("bogus", 1)])
def test_invalid_rules(rule):
    with pytest.raises(InvalidRule):
        split_basis(spectrum_basis([2.0, 1.0, 0.5, 0.1]), rule)


def test_deterministic_fit(rng):
    npix = 15
    columns = orthonormal_columns(rng, npix, 5)
    basis = BasisSet(columns[:, :2], columns[:, 2:], np.ones(5), 5)
    orthogonal = rng.standard_normal(npix)
    orthogonal -= columns @ (columns.T @ orthogonal)

    e1 = np.tile(orthogonal, (4, 1))
    e2 = np.tile(basis.psi[:, 0], (4, 1))
    fit = fit_deterministic(ResidualPair(e1, e2, "summer"), basis)
    np.testing.assert_allclose(fit.nu[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(fit.nu[1], [1.0, 0.0, 0.0], atol=1e-12)

    e2 = rng.standard_normal((6, npix))
    fit = fit_deterministic(ResidualPair(np.zeros_like(e2), e2, "summer"), basis)
    target = e2.mean(axis=0)
    expected = np.linalg.solve(basis.psi.T @ basis.psi, basis.psi.T @ target)
    np.testing.assert_allclose(fit.nu[1], expected, atol=1e-10)


def test_empty_deterministic_part():
    basis = spectrum_basis([1.0, 1.0])
    fit = fit_deterministic(ResidualPair(np.ones((3, 10)), np.ones((3, 10)), "summer"), basis)
    assert fit.nu.shape == (2, 0)
    np.testing.assert_array_equal(fit.term(basis, 1), np.zeros(10))


def test_build_residuals_uses_season_training_months(rng):
    w = fine_field(rng.standard_normal((36, 6)), 3, 2)
    obs = fine_field(rng.standard_normal((24, 6)), 3, 2)
    trend = fine_field(rng.standard_normal((36, 6)), 3, 2)
    residuals = build_residuals(w, obs, trend, "winter", (2001, 12))
    assert residuals.ntrain == 6
    rows = [5, 6, 7, 17, 18, 19]
    np.testing.assert_allclose(residuals.w_mean, w.values[rows].mean(axis=0))
    np.testing.assert_allclose(residuals.e1, w.values[rows] - residuals.w_mean)
    np.testing.assert_allclose(residuals.e2, obs.values[rows] - trend.values[rows])


def test_basis_file_round_trip(tmp_path, rng):
    grid = GridSpec.full("fine", 0.0, 0.0, 1.0, 1.0, 4, 5)
    columns = orthonormal_columns(rng, 20, 6)
    basis = BasisSet(columns[:, :2], columns[:, 2:], np.arange(6.0)[::-1], 5, "summer")
    write_basis(basis, grid, tmp_path / "b.gsf")
    loaded, loaded_grid = read_basis(tmp_path / "b.gsf")
    np.testing.assert_array_equal(loaded.phi, basis.phi)
    np.testing.assert_array_equal(loaded.psi, basis.psi)
    assert loaded.rank == 5 and loaded.season == "summer"
    assert loaded_grid.same_layout(grid)
