#!/usr/bin/env python3
"""
Synthetic coarse/fine datasets drawn from the two-stage generative model,
plus brute-force dense Gaussian oracles for the Stage-2 prediction.

Recipe (per month t, season-independent parameters):
    omega_l(t) ~ N(0, Q_l^-1)                 per level, (omega1, omega2)
    W(t)  = blockmean(mu(t) + U(C omega1(t) + delta1c(t)) + delta1(t)) + bias
    y(t)  = mu(t) + P (W(t) - blockmean(mu(t)) - bias) + Phi omega2(t) + delta2(t)
where P is the bilinear interpolation operator and Phi = P C is an
orthonormal basis orthogonal to the constant field.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from bgldown.config.pipeline import PipelineConfig, ScenarioSpec
from bgldown.services.basis_service import BasisSet, write_basis
from bgldown.services.gridded_io import (
    CoarseField,
    FineField,
    GridSpec,
    TimeIndex,
    format_month,
    month_range,
    write_field,
)
from bgldown.services.trend_service import interpolation_matrix
from bgldown.utils.errors import NotPositiveDefinite

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioTruth:
    """Everything the generator drew, for scoring and oracles."""
    phi: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    tau2: np.ndarray
    coarse_noise: float
    patterns: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    omega: np.ndarray = field(repr=False)       # (months, L, 2)
    trend: FineField = field(repr=False)
    model_fine: FineField = field(repr=False)   # latent fine field whose block mean (+ bias) is the model

    def summary(self) -> Dict:
        return {
            "nstoch": int(self.phi.shape[1]),
            "q": self.q.tolist(),
            "tau2": [float(v) for v in self.tau2],
            "coarse_noise": float(self.coarse_noise),
        }


@dataclass(frozen=True)
class Scenario:
    coarse: CoarseField
    obs: FineField
    future_truth: FineField
    truth: ScenarioTruth
    spec: ScenarioSpec
    train_end: Tuple[int, int]


def scenario_grids(spec: ScenarioSpec) -> Tuple[GridSpec, GridSpec]:
    """Coarse grid and the fine grid that tiles it `factor` x `factor` per cell."""
    coarse = GridSpec.full("coarse", spec.lon0, spec.lat0, spec.coarse_dlon, spec.coarse_dlat,
                           spec.coarse_ncols, spec.coarse_nrows)
    dlon, dlat = spec.coarse_dlon / spec.factor, spec.coarse_dlat / spec.factor
    fine = GridSpec.full(
        "fine",
        spec.lon0 - spec.coarse_dlon / 2 + dlon / 2,
        spec.lat0 - spec.coarse_dlat / 2 + dlat / 2,
        dlon, dlat, spec.coarse_ncols * spec.factor, spec.coarse_nrows * spec.factor,
    )
    return coarse, fine


def block_membership(spec: ScenarioSpec) -> np.ndarray:
    """Coarse cell index of every fine pixel (row-major)."""
    rows, cols = np.divmod(np.arange(spec.coarse_nrows * spec.factor * spec.coarse_ncols * spec.factor),
                           spec.coarse_ncols * spec.factor)
    return (rows // spec.factor) * spec.coarse_ncols + cols // spec.factor


def block_mean(values: np.ndarray, membership: np.ndarray, ncoarse: int) -> np.ndarray:
    """Average fine values (..., n) into coarse cells (..., K)."""
    counts = np.bincount(membership, minlength=ncoarse)
    onehot = np.zeros((membership.size, ncoarse))
    onehot[np.arange(membership.size), membership] = 1.0
    return values @ onehot / counts


def true_precision(spec: ScenarioSpec) -> np.ndarray:
    """Per-level 2 x 2 precision from decaying variances and a fixed correlation."""
    blocks = np.empty((spec.nstoch, 2, 2))
    for level in range(spec.nstoch):
        var1 = spec.omega_variance * spec.decay ** level
        var2 = spec.process2_scale * var1
        cov = spec.correlation * np.sqrt(var1 * var2)
        blocks[level] = np.linalg.inv(np.array([[var1, cov], [cov, var2]]))
    return blocks


def _trend(spec: ScenarioSpec, lon: np.ndarray, lat: np.ndarray, months) -> np.ndarray:
    lon_c, lat_c = lon - lon.mean(), lat - lat.mean()
    spatial = spec.base + spec.lon_gradient * lon_c + spec.lat_gradient * lat_c
    values = np.empty((len(months), lon.size))
    for t, (year, month) in enumerate(months):
        seasonal = spec.seasonal_amplitude * np.cos(2 * np.pi * (month - 2) / 12.0)
        warming = spec.warming_per_year * (year - spec.start_year + (month - 1) / 12.0)
        values[t] = spatial + seasonal + warming
    return values


def generate(spec: ScenarioSpec) -> Scenario:
    """Draw a scenario; identical specs give bit-identical fields."""
    rng = np.random.default_rng(spec.seed)
    coarse_grid, fine_grid = scenario_grids(spec)
    ncoarse, npix, nlev = coarse_grid.active_count, fine_grid.active_count, spec.nstoch
    interp = interpolation_matrix(coarse_grid, fine_grid).toarray()
    membership = block_membership(spec)

    raw = rng.standard_normal((ncoarse, nlev))
    q_fac, r_fac = linalg.qr(np.hstack([np.ones((npix, 1)), interp @ raw]), mode="economic")
    phi = q_fac[:, 1:]
    patterns = (np.hstack([np.ones((ncoarse, 1)), raw]) @ linalg.inv(r_fac))[:, 1:]

    q = true_precision(spec)
    chol = np.linalg.cholesky(np.linalg.inv(q))
    last = (spec.start_year + spec.train_years + spec.holdout_years - 1, 12)
    months = month_range((spec.start_year, 1), last)
    nmonths = len(months)
    omega = np.einsum("lij,tlj->tli", chol, rng.standard_normal((nmonths, nlev, 2)))
    coarse_delta = np.sqrt(spec.coarse_noise) * rng.standard_normal((nmonths, ncoarse))
    delta1 = np.sqrt(spec.tau2[0]) * rng.standard_normal((nmonths, npix))
    delta2 = np.sqrt(spec.tau2[1]) * rng.standard_normal((nmonths, npix))

    c_lon, c_lat = coarse_grid.coordinates()
    bias = spec.bias * (1.0 + 0.5 * (c_lon - c_lon.mean()) / max(np.ptp(c_lon), 1e-12))
    lon, lat = fine_grid.coordinates()
    mu = _trend(spec, lon, lat, months)

    anomaly = omega[:, :, 0] @ patterns.T + coarse_delta
    model_fine = mu + anomaly[:, membership] + delta1
    coarse_values = block_mean(model_fine, membership, ncoarse) + bias
    # Coarse signal the model carries beyond the aggregated trend and bias
    carried = coarse_values - block_mean(mu, membership, ncoarse) - bias
    obs_values = mu + carried @ interp.T + omega[:, :, 1] @ phi.T + delta2

    time = TimeIndex(tuple(months), spec.season_map)
    train_end = (spec.start_year + spec.train_years - 1, 12)
    train_pos = [i for i, m in enumerate(months) if m <= train_end]
    future_pos = [i for i, m in enumerate(months) if m > train_end]

    truth = ScenarioTruth(
        phi=phi, q=q, tau2=np.array([spec.tau2[0], spec.tau2[1]]), coarse_noise=spec.coarse_noise,
        patterns=patterns, bias=bias, omega=omega,
        trend=FineField(fine_grid, time, mu), model_fine=FineField(fine_grid, time, model_fine),
    )
    logger.info(
        f"Generated scenario seed={spec.seed}: {ncoarse} coarse cells, {npix} pixels, "
        f"{nmonths} months ({len(train_pos)} training)"
    )
    return Scenario(
        coarse=CoarseField(coarse_grid, time, coarse_values),
        obs=FineField(fine_grid, time.subset(train_pos), obs_values[train_pos]),
        future_truth=FineField(fine_grid, time.subset(future_pos), obs_values[future_pos]),
        truth=truth,
        spec=spec,
        train_end=train_end,
    )


def _joint_blocks(phi: np.ndarray, q: np.ndarray, tau2: np.ndarray):
    prior = np.linalg.inv(q)
    sigma1 = phi @ np.diag(prior[:, 0, 0]) @ phi.T + tau2[0] * np.eye(phi.shape[0])
    try:
        factor = linalg.cho_factor(sigma1, lower=True)
    except linalg.LinAlgError as err:
        raise NotPositiveDefinite("Var(e1) is not positive definite") from err
    return prior, factor


def dense_conditional_oracle(phi: np.ndarray, q: np.ndarray, tau2: np.ndarray,
                             e1: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of omega2 given e1 from the dense joint Gaussian."""
    prior, factor = _joint_blocks(phi, q, tau2)
    cross = np.diag(prior[:, 1, 0]) @ phi.T          # Cov(omega2, e1)
    mean = cross @ linalg.cho_solve(factor, e1)
    cov = np.diag(prior[:, 1, 1]) - cross @ linalg.cho_solve(factor, cross.T)
    return mean, cov


def dense_predictive_oracle(phi: np.ndarray, q: np.ndarray, tau2: np.ndarray,
                            e1: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and pixelwise variance of e2 given e1 from the dense joint Gaussian."""
    prior, factor = _joint_blocks(phi, q, tau2)
    cross = phi @ np.diag(prior[:, 1, 0]) @ phi.T    # Cov(e2, e1)
    sigma2 = phi @ np.diag(prior[:, 1, 1]) @ phi.T + tau2[1] * np.eye(phi.shape[0])
    mean = cross @ linalg.cho_solve(factor, e1)
    cov = sigma2 - cross @ linalg.cho_solve(factor, cross.T)
    return mean, np.diag(cov).copy()


def write_scenario(scenario: Scenario, directory: Union[str, Path],
                   overrides: Optional[Dict] = None) -> Dict[str, Path]:
    """Write coarse/obs/truth fields, the true basis, a truth sidecar and a runnable pipeline.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "coarse": directory / "coarse.gsf",
        "obs": directory / "obs.gsf",
        "truth": directory / "truth.gsf",
        "basis": directory / "basis-true.gsf",
        "sidecar": directory / "truth.json",
        "config": directory / "pipeline.json",
    }
    write_field(scenario.coarse, paths["coarse"])
    write_field(scenario.obs, paths["obs"])
    write_field(scenario.future_truth, paths["truth"])
    fine_grid = scenario.obs.spec
    true_basis = BasisSet(scenario.truth.phi, np.zeros((fine_grid.active_count, 0)),
                          np.zeros(scenario.truth.phi.shape[1]), scenario.truth.phi.shape[1], "all")
    write_basis(true_basis, fine_grid, paths["basis"])

    sidecar = {"seed": scenario.spec.seed, "train_end": format_month(scenario.train_end),
               **scenario.truth.summary()}
    with open(paths["sidecar"], "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)

    future = scenario.future_truth.time.entries
    settings = {
        "coarse_path": paths["coarse"].name,
        "obs_path": paths["obs"].name,
        "truth_path": paths["truth"].name,
        "output_dir": "out",
        "train_end": format_month(scenario.train_end),
        "holdout_start": format_month(future[0]),
        "holdout_end": format_month(future[-1]),
        "season_map": scenario.spec.season_map,
        "split": {"kind": "fixed", "value": scenario.spec.nstoch},
        "seed": scenario.spec.seed,
        **(overrides or {}),
    }
    config = PipelineConfig.model_validate(settings)
    with open(paths["config"], "w") as f:
        json.dump(config.model_dump(), f, indent=2, sort_keys=True)
    logger.info(f"Scenario written to {directory}")
    return paths
