#!/usr/bin/env python3
"""
Stage-2 prediction for future months.

The model residual e1 of a month informs omega1; omega2 follows per level
from the bivariate precision block, and the downscaled field is
    y_hat = mu_hat + Phi omega2_hat + Psi nu2
with a pointwise predictive standard deviation.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from bgldown.services.basis_service import future_e1
from bgldown.services.bgl_service import BglModel
from bgldown.services.gridded_io import FineField, Month, format_month, write_field
from bgldown.utils.errors import (
    DimensionMismatch,
    MalformedInput,
    ModelMissing,
    NotPositiveDefinite,
    SingularSystem,
)

logger = logging.getLogger(__name__)

OMEGA1_MODES = ("posterior", "gls")


@dataclass(frozen=True)
class CoefficientPrediction:
    """Conditional moments of omega2 given a month's e1."""
    omega2_mean: np.ndarray
    omega2_var: np.ndarray
    omega2_cov: np.ndarray = field(repr=False)
    month: Optional[Month] = None


@dataclass(frozen=True)
class DownscaledField:
    mean: FineField
    sd: FineField
    provenance: Dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.mean.spec.same_layout(self.sd.spec) or self.mean.time != self.sd.time:
            raise DimensionMismatch("mean and sd of a downscaled field must share grid and months")


def _omega1_prior(model: BglModel) -> np.ndarray:
    """Marginal prior variance of omega1 per level, (Q_l^-1)_11."""
    return model.prior_cov[:, 0, 0]


def _centred_e1(e1: np.ndarray, model: BglModel) -> np.ndarray:
    e1 = np.asarray(e1, dtype=np.float64)
    if e1.shape != (model.basis.npix,):
        raise DimensionMismatch(f"e1 has shape {e1.shape}, model expects ({model.basis.npix},)")
    return e1 - model.deterministic(0)


def gls_omega1(e1: np.ndarray, model: BglModel) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised least squares estimate of omega1 and its covariance.

    Sigma_1 = Phi V Phi^T + tau1^2 I is never formed; Phi^T Sigma_1^-1 is
    applied through the Woodbury identity.

    Raises:
        SingularSystem: Phi^T Sigma_1^-1 Phi is not invertible
    """
    phi, noise1 = model.basis.phi, float(model.tau2[0])
    prior = _omega1_prior(model)
    gram = phi.T @ phi
    projected = phi.T @ _centred_e1(e1, model)
    try:
        core = linalg.cho_factor(np.diag(noise1 / prior) + gram, lower=True)
    except linalg.LinAlgError as err:
        raise SingularSystem("tau1^2 V^-1 + Phi^T Phi is singular") from err
    info = (gram - gram @ linalg.cho_solve(core, gram)) / noise1
    rhs = (projected - gram @ linalg.cho_solve(core, projected)) / noise1
    try:
        factor = linalg.cho_factor(0.5 * (info + info.T), lower=True)
    except linalg.LinAlgError as err:
        raise SingularSystem("Phi^T Sigma_1^-1 Phi is singular") from err
    estimate = linalg.cho_solve(factor, rhs)
    cov = linalg.cho_solve(factor, np.eye(len(prior)))
    return estimate, 0.5 * (cov + cov.T)


def posterior_omega1(e1: np.ndarray, model: BglModel) -> Tuple[np.ndarray, np.ndarray]:
    """Exact Gaussian posterior of omega1 given e1: (V^-1 + Phi^T Phi / tau1^2)^-1 form."""
    phi, noise1 = model.basis.phi, float(model.tau2[0])
    prior = _omega1_prior(model)
    precision = np.diag(1.0 / prior) + phi.T @ phi / noise1
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except linalg.LinAlgError as err:
        raise SingularSystem("posterior precision of omega1 is singular") from err
    cov = linalg.cho_solve(factor, np.eye(len(prior)))
    mean = cov @ (phi.T @ _centred_e1(e1, model)) / noise1
    return mean, 0.5 * (cov + cov.T)


def condition_omega2(omega1_mean: np.ndarray, omega1_cov: np.ndarray, model: BglModel,
                     month: Optional[Month] = None) -> CoefficientPrediction:
    """Law of total expectation and variance over omega1 given e1.

    mean_l = -(Q_l)_21 / (Q_l)_22 * omega1_l
    var_l = 1 / (Q_l)_22 + ((Q_l)_21 / (Q_l)_22)^2 * Var[omega1_l | e1]

    Raises:
        NotPositiveDefinite: a (Q_l)_22 entry is not positive
    """
    if model.nproc != 2:
        raise MalformedInput(f"conditioning needs two processes, model has {model.nproc}")
    omega1_cov = np.asarray(omega1_cov, dtype=np.float64)
    if omega1_cov.ndim < 2:
        omega1_cov = np.diag(np.atleast_1d(omega1_cov))
    q22 = model.q[:, 1, 1]
    if np.any(q22 <= 0):
        level = int(np.flatnonzero(q22 <= 0)[0])
        raise NotPositiveDefinite(f"{model.season}: (Q)_22 of level {level} is not positive")
    gain = -model.q[:, 1, 0] / q22
    mean = gain * np.asarray(omega1_mean, dtype=np.float64)
    cov = np.diag(1.0 / q22) + gain[:, None] * omega1_cov * gain[None, :]
    return CoefficientPrediction(mean, np.diag(cov).copy(), cov, month)


def predict_coefficients(e1: np.ndarray, model: BglModel, omega1_mode: str = "posterior",
                         month: Optional[Month] = None) -> CoefficientPrediction:
    if omega1_mode not in OMEGA1_MODES:
        raise MalformedInput(f"omega1_mode must be one of {OMEGA1_MODES}, got \"{omega1_mode}\"")
    estimator = posterior_omega1 if omega1_mode == "posterior" else gls_omega1
    mean1, cov1 = estimator(e1, model)
    return condition_omega2(mean1, cov1, model, month)


def stage2_mean(e1: np.ndarray, model: BglModel, omega1_mode: str = "posterior") -> np.ndarray:
    """Predicted e2 for one month: Phi omega2_hat + Psi nu2."""
    coeffs = predict_coefficients(e1, model, omega1_mode)
    return model.basis.phi @ coeffs.omega2_mean + model.deterministic(1)


def downscale_month(trend_month: np.ndarray, e1: np.ndarray, model: BglModel,
                    omega1_mode: str = "posterior", nugget: bool = True,
                    month: Optional[Month] = None) -> Tuple[np.ndarray, np.ndarray, CoefficientPrediction]:
    """Downscale one month.

    Returns:
        (mean over active pixels, predictive sd, coefficient prediction)
    """
    trend_month = np.asarray(trend_month, dtype=np.float64)
    if trend_month.shape != (model.basis.npix,):
        raise DimensionMismatch(f"trend has {trend_month.size} pixels, model {model.basis.npix}")
    coeffs = predict_coefficients(e1, model, omega1_mode, month)
    phi = model.basis.phi
    mean = trend_month + phi @ coeffs.omega2_mean + model.deterministic(1)
    variance = np.einsum("nl,lm,nm->n", phi, coeffs.omega2_cov, phi)
    if nugget:
        variance = variance + model.tau2[1]
    return mean, np.sqrt(np.maximum(variance, 0.0)), coeffs


def downscale(trend: FineField, w: FineField, models: Mapping[str, BglModel],
              months: Optional[Sequence[Month]] = None, omega1_mode: str = "posterior",
              nugget: bool = True, threads: int = 1) -> DownscaledField:
    """Downscale many months with the model of each month's season.

    Args:
        trend: Stage-1 trend covering the requested months
        w: Interpolated model field covering the requested months
        models: Fitted models keyed by season
        months: Months to predict (default: every trend month)
        omega1_mode: 'posterior' or 'gls'
        nugget: Include tau2^2 in the predictive sd
        threads: Worker threads

    Raises:
        ModelMissing: no model for a requested month's season
    """
    if not trend.spec.same_layout(w.spec):
        raise DimensionMismatch("trend and interpolated model field differ in grid")
    months = list(trend.time.entries if months is None else months)
    jobs = []
    for month in months:
        t_pos, w_pos = trend.time.index_of(month), w.time.index_of(month)
        if t_pos < 0 or w_pos < 0:
            raise DimensionMismatch(f"{format_month(month)} is missing from the trend or model field")
        season = trend.time.season_of(month[1])
        if season not in models:
            raise ModelMissing(f"No fitted model for season {season} ({format_month(month)})")
        jobs.append((month, t_pos, w_pos, models[season]))

    def run(job):
        month, t_pos, w_pos, model = job
        e1 = future_e1(w.values[w_pos], model.w_mean)
        return downscale_month(trend.values[t_pos], e1, model, omega1_mode, nugget, month)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, jobs))

    time = trend.time.subset([job[1] for job in jobs])
    mean = FineField(trend.spec, time, np.array([r[0] for r in results]).reshape(len(jobs), -1))
    sd = FineField(trend.spec, time, np.array([r[1] for r in results]).reshape(len(jobs), -1))
    provenance = {
        "omega1_mode": omega1_mode,
        "nugget": nugget,
        "months": {
            format_month(job[0]): {
                "season": job[3].season,
                "lambda": job[3].lam,
                "rho": job[3].rho,
                "tau2": [float(v) for v in job[3].tau2],
                "omega2_mean": [float(v) for v in res[2].omega2_mean],
                "omega2_var": [float(v) for v in res[2].omega2_var],
            }
            for job, res in zip(jobs, results)
        },
    }
    logger.info(f"Downscaled {len(jobs)} months with {max(1, threads)} threads")
    return DownscaledField(mean, sd, provenance)


def write_downscaled(result: DownscaledField, directory: Union[str, Path],
                     extra: Optional[Dict] = None) -> List[Path]:
    """Write `<YYYY-MM>.mean.gsf`, `.sd.gsf` and a `.json` sidecar per month."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for t, month in enumerate(result.mean.time.entries):
        stem = format_month(month)
        mean_path, sd_path = directory / f"{stem}.mean.gsf", directory / f"{stem}.sd.gsf"
        write_field(result.mean.select([t]), mean_path)
        write_field(result.sd.select([t]), sd_path)
        sidecar = {
            "month": stem,
            "omega1_mode": result.provenance.get("omega1_mode"),
            "nugget": result.provenance.get("nugget"),
            **result.provenance.get("months", {}).get(stem, {}),
            **(extra or {}),
        }
        with open(directory / f"{stem}.json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
        written += [mean_path, sd_path]
    return written
