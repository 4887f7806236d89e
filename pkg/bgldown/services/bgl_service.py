#!/usr/bin/env python3
"""
Stage 2: Basis Graphical Lasso.

The stochastic coefficients of level l are bivariate normal with precision
Q_l, the residual covariance is Sigma = B Q^-1 B^T + D with D the per-process
nugget. Q is estimated by minimising the penalised Gaussian negative
log-likelihood with a difference-of-convex outer loop; each convex
subproblem is a fused graphical lasso over the L levels solved by ADMM.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from bgldown.config.settings import DEFAULT_SEASON_MAP
from bgldown.services.basis_service import (
    BasisSet,
    DeterministicFit,
    ResidualPair,
    fit_deterministic,
    read_basis,
    stochastic_residuals,
)
from bgldown.services.gridded_io import (
    decode_season_map,
    encode_season_map,
    read_container,
    write_container,
)
from bgldown.utils.errors import (
    DimensionMismatch,
    Diverged,
    InsufficientData,
    MalformedHeader,
    MalformedInput,
    ModelMissing,
    NotPositiveDefinite,
)
from bgldown.utils.helpers import (
    floor_eigenvalues,
    fused_lasso_prox,
    is_spd,
    logdet_spd,
    offdiag_mask,
    relative_change,
)

logger = logging.getLogger(__name__)

NOISE_PROJECTIONS = ("full", "stochastic")
DESCENT_SLACK = 1e-9
ORTHONORMAL_TOL = 1e-10


@dataclass(frozen=True)
class BglOptions:
    tol: float = 1e-6
    max_outer: int = 50
    inner_tol: float = 1e-8
    inner_max: int = 2000
    eig_floor: float = 1e-8
    tau_floor: float = 1e-8
    noise_projection: str = "full"

    def __post_init__(self):
        if self.noise_projection not in NOISE_PROJECTIONS:
            raise MalformedInput(f"noise_projection must be one of {NOISE_PROJECTIONS}")
        if self.max_outer < 1 or self.inner_max < 1:
            raise MalformedInput("iteration budgets must be positive")


@dataclass(frozen=True)
class SampleStats:
    """Sufficient statistics of the stochastic residual samples.

    cross[l] = mean_t c_l(t) c_l(t)^T with c_lj(t) = phi_l^T r_j(t)
    full_cross is the same over all levels in level-major order (l * p + j)
    """
    cross: np.ndarray = field(repr=False)
    full_cross: np.ndarray = field(repr=False)
    gram: np.ndarray = field(repr=False)
    ss: np.ndarray
    npix: int
    nobs: int

    def __post_init__(self):
        if self.nobs < 1:
            raise InsufficientData("sample statistics need at least one observation")

    @property
    def nlevels(self) -> int:
        return self.cross.shape[0]

    @property
    def nproc(self) -> int:
        return self.ss.shape[0]

    @property
    def orthonormal(self) -> bool:
        eye = np.eye(self.gram.shape[0])
        return bool(np.abs(self.gram - eye).max(initial=0.0) < ORTHONORMAL_TOL)


@dataclass(frozen=True)
class BglModel:
    """Fitted seasonal Stage-2 model."""
    q: np.ndarray = field(repr=False)
    tau2: np.ndarray
    lam: float
    rho: float
    basis: BasisSet = field(repr=False)
    season: str
    nu: np.ndarray = field(repr=False)
    w_mean: np.ndarray = field(repr=False)
    trace: Tuple[float, ...] = ()
    converged: bool = True
    season_map: Mapping[str, Tuple[int, ...]] = field(
        default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_SEASON_MAP.items()}, repr=False
    )

    @property
    def nlevels(self) -> int:
        return self.q.shape[0]

    @property
    def nproc(self) -> int:
        return self.q.shape[1]

    @property
    def prior_cov(self) -> np.ndarray:
        return np.linalg.inv(self.q)

    def deterministic(self, process: int) -> np.ndarray:
        return DeterministicFit(self.nu).term(self.basis, process)


def sample_stats(samples: np.ndarray, phi: np.ndarray) -> SampleStats:
    """Build SampleStats from samples shaped (nobs, p, n) and an n x L basis."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[2] != phi.shape[0]:
        raise DimensionMismatch(f"samples {samples.shape} do not match basis with {phi.shape[0]} pixels")
    nobs, nproc, npix = samples.shape
    nlev = phi.shape[1]
    coeffs = np.einsum("tjn,nl->tlj", samples, phi)
    cross = np.einsum("tli,tlj->lij", coeffs, coeffs) / nobs
    flat = coeffs.reshape(nobs, nlev * nproc)
    full_cross = flat.T @ flat / nobs
    ss = np.einsum("tjn,tjn->j", samples, samples) / nobs
    return SampleStats(cross, full_cross, phi.T @ phi, ss, npix, nobs)


def sample_covariance(samples: np.ndarray) -> np.ndarray:
    """Dense (p*n) x (p*n) second moment of the stacked residuals, process-major."""
    flat = np.asarray(samples, dtype=np.float64).reshape(samples.shape[0], -1)
    return flat.T @ flat / flat.shape[0]


def _check_blocks(q: np.ndarray, tau2: np.ndarray) -> None:
    if np.any(np.asarray(tau2) <= 0):
        raise NotPositiveDefinite(f"noise variances must be positive, got {list(np.asarray(tau2))}")
    for level, block in enumerate(q):
        if not np.allclose(block, block.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(block).max())):
            raise NotPositiveDefinite(f"Q block of level {level} is not symmetric")
        logdet_spd(block, f"Q block of level {level}")


def nll_direct(q: np.ndarray, tau2: np.ndarray, phi: np.ndarray, sample_cov: np.ndarray) -> float:
    """log det Sigma + tr(S Sigma^-1) with Sigma formed densely.

    Only meant for small n; Sigma is (p*n) x (p*n).
    """
    tau2 = np.asarray(tau2, dtype=np.float64)
    nproc, (npix, nlev) = tau2.shape[0], phi.shape
    if sample_cov.shape != (nproc * npix, nproc * npix):
        raise DimensionMismatch(f"sample covariance {sample_cov.shape} != ({nproc * npix}, {nproc * npix})")
    sigma = np.diag(np.repeat(tau2, npix))
    if nlev:
        _check_blocks(q, tau2)
        loading = np.zeros((nproc * npix, nproc * nlev))
        for j in range(nproc):
            loading[j * npix:(j + 1) * npix, j::nproc] = phi
        prior = linalg.block_diag(*np.linalg.inv(q))
        sigma = sigma + loading @ prior @ loading.T
    try:
        factor = linalg.cho_factor(sigma, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise NotPositiveDefinite("Sigma is not positive definite") from err
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return logdet + float(np.trace(linalg.cho_solve(factor, sample_cov, check_finite=False)))


def _level_objective(q: np.ndarray, tau2: np.ndarray, cross: np.ndarray) -> float:
    """sum_l log det(Q_l^-1 + D_p) + tr(C_l (Q_l^-1 + D_p)^-1)."""
    if q.shape[0] == 0:
        return 0.0
    marginal = np.linalg.inv(q) + np.diag(tau2)
    try:
        chol = np.linalg.cholesky(marginal)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite("Q^-1 + D is not positive definite") from err
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
    return float(logdet + np.sum(cross * np.linalg.inv(marginal)))


def _noise_terms(tau2: np.ndarray, stats: SampleStats) -> float:
    """Q-independent part of the orthonormal-basis objective."""
    captured = np.einsum("ljj->j", stats.cross) if stats.nlevels else np.zeros(stats.nproc)
    orthogonal = np.maximum(stats.ss - captured, 0.0)
    return float((stats.npix - stats.nlevels) * np.log(tau2).sum() + np.sum(orthogonal / tau2))


def _dense_smw(q: np.ndarray, tau2: np.ndarray, stats: SampleStats) -> float:
    nlev = stats.nlevels
    inv_noise = np.tile(1.0 / tau2, nlev)
    gram_term = np.kron(stats.gram, np.diag(1.0 / tau2))
    precision = linalg.block_diag(*q)
    inner = precision + gram_term
    weighted = inv_noise[:, None] * stats.full_cross * inv_noise[None, :]
    try:
        factor = linalg.cho_factor(inner, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise NotPositiveDefinite("Q + Phi^T D^-1 Phi is not positive definite") from err
    logdet_inner = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    logdet_q = sum(logdet_spd(block, f"Q block of level {l}") for l, block in enumerate(q))
    correction = float(np.trace(linalg.cho_solve(factor, weighted, check_finite=False)))
    return (logdet_inner - logdet_q - correction
            + stats.npix * float(np.log(tau2).sum()) + float(np.sum(stats.ss / tau2)))


def nll_smw(q: np.ndarray, tau2: np.ndarray, stats: SampleStats) -> float:
    """Negative log-likelihood through the Sherman-Morrison-Woodbury reduction.

    Equal to nll_direct. With an orthonormal basis Q + Phi^T D^-1 Phi is
    block diagonal and the value is a sum of L independent p x p terms;
    otherwise the dense pL x pL form is used.

    Raises:
        NotPositiveDefinite: Q block or tau2 not positive
    """
    tau2 = np.asarray(tau2, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64).reshape(stats.nlevels, stats.nproc, stats.nproc)
    _check_blocks(q, tau2)
    if stats.orthonormal:
        return _level_objective(q, tau2, stats.cross) + _noise_terms(tau2, stats)
    return _dense_smw(q, tau2, stats)


def penalty(q: np.ndarray, lam: float, rho: float) -> float:
    """lam * sum |offdiag Q_l| + rho * sum |offdiag(Q_l - Q_l+1)|, both triangles counted."""
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0:
        return 0.0
    off = q * offdiag_mask(q.shape[1])
    value = lam * float(np.abs(off).sum())
    if q.shape[0] > 1:
        value += rho * float(np.abs(np.diff(off, axis=0)).sum())
    return value


def lambda_upper_bound(stats: SampleStats, tau2: np.ndarray) -> float:
    """Sparsity level above which every DC subproblem has a diagonal optimum.

    The linearised statistic is (D^-1 + Q)^-1 + (D^-1 + Q)^-1 D^-1 C D^-1 (D^-1 + Q)^-1
    and ||(D^-1 + Q)^-1|| <= max tau^2 for any SPD Q.
    """
    tau2 = np.asarray(tau2, dtype=np.float64)
    if stats.nlevels == 0:
        return 0.0
    inv_noise = np.diag(1.0 / tau2)
    tmax = float(tau2.max())
    norms = [np.linalg.norm(inv_noise @ block @ inv_noise, 2) for block in stats.cross]
    return tmax + tmax ** 2 * float(max(norms))


def estimate_noise(residuals: ResidualPair, basis: BasisSet, opts: Optional[BglOptions] = None) -> np.ndarray:
    """Per-process nugget tau_j^2 from what the basis cannot represent.

    With projection 'full' every EOF column is projected out of the raw
    residuals. With 'stochastic' the deterministic term is removed first and
    only the L stochastic columns are projected out.
    """
    opts = opts or BglOptions()
    if opts.noise_projection == "full":
        samples, columns = residuals.stacked(), basis.full
    else:
        samples = stochastic_residuals(residuals, basis, fit_deterministic(residuals, basis))
        columns = basis.phi
    tau2 = np.zeros(samples.shape[1])
    for j in range(samples.shape[1]):
        data = samples[:, j, :]
        remainder = data - (data @ columns) @ columns.T
        marginal = float(np.var(data))
        floor = opts.tau_floor * marginal if marginal > 0 else opts.tau_floor
        tau2[j] = max(float(np.mean(remainder ** 2)), floor)
        if tau2[j] == floor:
            logger.debug(f"Noise variance of process {j + 1} in {residuals.season} sits at its floor {floor:.3e}")
    return tau2


def initial_precision(stats: SampleStats) -> np.ndarray:
    """Inverse of each level's regularised coefficient second moment."""
    p = stats.nproc
    blocks = np.empty_like(stats.cross)
    for level, block in enumerate(stats.cross):
        ridge = 0.01 * np.trace(block) / p
        if ridge <= 0:
            blocks[level] = np.eye(p)
            continue
        blocks[level] = np.linalg.inv(block + ridge * np.eye(p))
    return 0.5 * (blocks + np.transpose(blocks, (0, 2, 1)))


def linearised_statistic(q: np.ndarray, tau2: np.ndarray, cross: np.ndarray) -> np.ndarray:
    """Gradient of the concave part at Q: A D + A C A^T with A = (I + D Q)^-1."""
    noise = np.diag(tau2)
    shrink = np.linalg.inv(np.eye(q.shape[1]) + noise @ q)
    stat = shrink @ noise + shrink @ cross @ np.transpose(shrink, (0, 2, 1))
    return 0.5 * (stat + np.transpose(stat, (0, 2, 1)))


def surrogate(q: np.ndarray, stat: np.ndarray, lam: float, rho: float) -> float:
    """Convex majoriser sum_l [-log det Q_l + tr(S~_l Q_l)] + penalty (up to a constant)."""
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        return np.inf
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
    return float(-logdet + np.sum(stat * q) + penalty(q, lam, rho))


def _offdiag_prox(a: np.ndarray, sparsity: float, fusion: float) -> np.ndarray:
    out = np.array(a, copy=True)
    rows, cols = np.triu_indices(a.shape[1], 1)
    for i, j in zip(rows, cols):
        signal = 0.5 * (a[:, i, j] + a[:, j, i])
        out[:, i, j] = out[:, j, i] = fused_lasso_prox(signal, sparsity, fusion)
    return out


def _precision_step(d: np.ndarray, step: float) -> np.ndarray:
    """Positive root of step * x - 1/x = d, written without cancellation."""
    root = np.sqrt(d * d + 4.0 * step)
    return np.where(d > 0, (d + root) / (2.0 * step), 2.0 / (root - d))


def fused_graphical_lasso(stat: np.ndarray, lam: float, rho: float, start: np.ndarray,
                          opts: BglOptions) -> Tuple[np.ndarray, bool]:
    """ADMM for min sum_l [-log det X_l + tr(S_l X_l)] + penalty(X; lam, rho).

    Returns:
        (solution with exact zeros from the proximal step, converged flag)
    """
    scale = float(np.mean(np.diagonal(stat, axis1=1, axis2=2)))
    step = scale ** 2 if scale > 0 else 1.0
    z = np.array(start, dtype=np.float64, copy=True)
    u = np.zeros_like(z)
    size = np.sqrt(z.size)
    converged = False

    for iteration in range(opts.inner_max):
        d, v = np.linalg.eigh(step * (z - u) - stat)
        theta = np.einsum("lij,lj,lkj->lik", v, _precision_step(d, step), v)
        z_old = z
        z = _offdiag_prox(theta + u, lam / step, rho / step)
        u = u + theta - z

        primal = np.linalg.norm(theta - z)
        dual = step * np.linalg.norm(z - z_old)
        eps_primal = opts.inner_tol * max(np.linalg.norm(theta), np.linalg.norm(z)) + 1e-14 * size
        eps_dual = opts.inner_tol * step * np.linalg.norm(u) + 1e-14 * size
        if primal <= eps_primal and dual <= eps_dual:
            converged = True
            break
        if primal > 10.0 * dual:
            step *= 2.0
            u /= 2.0
        elif dual > 10.0 * primal:
            step /= 2.0
            u *= 2.0

    if not converged:
        logger.warning(f"ADMM stopped after {opts.inner_max} iterations without meeting inner_tol")
    else:
        logger.debug(f"ADMM converged in {iteration + 1} iterations")

    eigmin = np.linalg.eigvalsh(z).min(axis=1)
    if np.any(eigmin <= opts.eig_floor):
        logger.warning(f"Flooring eigenvalues of {int(np.sum(eigmin <= opts.eig_floor))} precision blocks")
        z = floor_eigenvalues(z, 2.0 * opts.eig_floor)
    return z, converged


def fit_precision(stats: SampleStats, tau2: np.ndarray, lam: float, rho: float,
                  opts: Optional[BglOptions] = None, start: Optional[np.ndarray] = None
                  ) -> Tuple[np.ndarray, List[float], bool]:
    """DC iterations on the penalised objective for fixed tau2.

    Returns:
        (Q blocks, penalised objective per accepted iterate, converged flag)

    Raises:
        Diverged: the penalised objective increased beyond the slack
    """
    opts = opts or BglOptions()
    if lam < 0 or rho < 0:
        raise MalformedInput(f"penalties must be non-negative, got lambda={lam}, rho={rho}")
    if not stats.orthonormal:
        raise MalformedInput("BGL fitting needs an orthonormal stochastic basis")
    tau2 = np.asarray(tau2, dtype=np.float64)
    if stats.nlevels == 0:
        return np.zeros((0, stats.nproc, stats.nproc)), [nll_smw(np.zeros((0, 0, 0)), tau2, stats)], True

    q = initial_precision(stats) if start is None else np.array(start, dtype=np.float64)
    constant = _noise_terms(tau2, stats)
    varying = _level_objective(q, tau2, stats.cross) + penalty(q, lam, rho)
    trace = [constant + varying]
    converged = False

    for outer in range(opts.max_outer):
        stat = linearised_statistic(q, tau2, stats.cross)
        candidate, _ = fused_graphical_lasso(stat, lam, rho, q, opts)
        if surrogate(candidate, stat, lam, rho) >= surrogate(q, stat, lam, rho):
            logger.info(f"DC iteration {outer + 1}: no surrogate decrease, keeping current iterate")
            converged = True
            break
        new_varying = _level_objective(candidate, tau2, stats.cross) + penalty(candidate, lam, rho)
        objective = constant + new_varying
        if objective > trace[-1] + DESCENT_SLACK * max(1.0, abs(trace[-1])):
            raise Diverged(
                f"DC objective increased at iteration {outer + 1}: {trace[-1]:.12g} -> {objective:.12g}"
            )
        decrease = relative_change(varying, new_varying)
        q, varying = candidate, new_varying
        trace.append(objective)
        logger.info(f"DC iteration {outer + 1}: objective {objective:.10g} (relative decrease {decrease:.3e})")
        if decrease < opts.tol:
            converged = True
            break
    else:
        logger.warning(f"DC loop reached max_outer={opts.max_outer} before tol={opts.tol}")
    return q, trace, converged


def fit(residuals: ResidualPair, basis: BasisSet, lam: float, rho: float,
        opts: Optional[BglOptions] = None, tau2: Optional[np.ndarray] = None,
        season_map: Optional[Mapping[str, Sequence[int]]] = None) -> BglModel:
    """Fit the seasonal BGL model for fixed penalties.

    Args:
        residuals: Training residual pair of the season
        basis: Split EOF basis of the same season
        lam: Sparsity penalty
        rho: Fusion penalty
        opts: Solver options
        tau2: Noise variances; estimated with estimate_noise when omitted
        season_map: Season map stored with the model

    Returns:
        BglModel
    """
    opts = opts or BglOptions()
    if residuals.npix != basis.npix:
        raise DimensionMismatch(f"residuals have {residuals.npix} pixels, basis {basis.npix}")
    det = fit_deterministic(residuals, basis)
    samples = stochastic_residuals(residuals, basis, det)
    stats = sample_stats(samples, basis.phi)
    tau2 = estimate_noise(residuals, basis, opts) if tau2 is None else np.asarray(tau2, dtype=np.float64)
    logger.info(
        f"Fitting BGL for {residuals.season}: L={basis.nstoch}, T={residuals.ntrain}, "
        f"lambda={lam:g}, rho={rho:g}, tau2={np.array2string(tau2, precision=4)}"
    )
    q, trace, converged = fit_precision(stats, tau2, lam, rho, opts)
    w_mean = residuals.w_mean if residuals.w_mean is not None else np.zeros(residuals.npix)
    season_map = season_map or DEFAULT_SEASON_MAP
    return BglModel(
        q=q, tau2=tau2, lam=float(lam), rho=float(rho), basis=basis, season=residuals.season,
        nu=det.nu, w_mean=np.asarray(w_mean, dtype=np.float64), trace=tuple(trace), converged=converged,
        season_map={k: tuple(v) for k, v in season_map.items()},
    )


def contiguous_folds(count: int, folds: int) -> List[np.ndarray]:
    """Split range(count) into `folds` contiguous blocks of near-equal size."""
    if folds < 2:
        raise MalformedInput(f"cross-validation needs at least 2 folds, got {folds}")
    if count < folds:
        raise InsufficientData(f"{count} training months cannot fill {folds} folds")
    return [np.asarray(block) for block in np.array_split(np.arange(count), folds)]


def select_penalties(residuals: ResidualPair, basis: BasisSet, grid: Sequence[Tuple[float, float]],
                     folds: int = 5, opts: Optional[BglOptions] = None) -> Tuple[float, float]:
    """Choose (lambda, rho) by K-fold cross-validation over contiguous month blocks.

    The basis is held fixed. Each candidate is scored by the mean held-out
    squared error of the Stage-2 mean of e2 given e1. Ties keep the earlier
    grid entry.

    Raises:
        InsufficientData: fewer training months than folds
    """
    from bgldown.services.predict_service import stage2_mean

    if not grid:
        raise MalformedInput("penalty grid is empty")
    if len(grid) == 1:
        return float(grid[0][0]), float(grid[0][1])
    blocks = contiguous_folds(residuals.ntrain, folds)
    scores = []
    for lam, rho in grid:
        errors = []
        for held in blocks:
            train = residuals.rows(np.setdiff1d(np.arange(residuals.ntrain), held))
            model = fit(train, basis, lam, rho, opts)
            for t in held:
                errors.append(np.mean((residuals.e2[t] - stage2_mean(residuals.e1[t], model)) ** 2))
        scores.append(float(np.mean(errors)))
        logger.info(f"CV {residuals.season}: lambda={lam:g}, rho={rho:g} -> held-out MSE {scores[-1]:.6g}")
    best = int(np.argmin(scores))
    return float(grid[best][0]), float(grid[best][1])


def validate(model: BglModel, tol: float = 1e-10) -> List[str]:
    """Check fitted-model invariants; returns a list of violations."""
    problems = []
    if np.any(model.tau2 <= 0):
        problems.append(f"{model.season}: non-positive noise variance {list(model.tau2)}")
    for level, block in enumerate(model.q):
        if not np.allclose(block, block.T, rtol=0.0, atol=tol * max(1.0, np.abs(block).max())):
            problems.append(f"{model.season}: Q block {level} not symmetric")
            continue
        if not is_spd(block):
            problems.append(f"{model.season}: Q block {level} not positive definite")
    return problems


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v], dtype=np.float64)


def write_model(model: BglModel, path: Union[str, Path], basis_ref: str) -> None:
    """Persist a model as `kind=bgl-model`; the basis lives in `basis_ref` next to it."""
    items = [
        ("kind", "bgl-model"),
        ("season", model.season),
        ("nproc", str(model.nproc)),
        ("nlevels", str(model.nlevels)),
        ("nbasis", str(model.basis.total)),
        ("npix", str(model.basis.npix)),
        ("tau2", _floats(model.tau2)),
        ("lambda", repr(float(model.lam))),
        ("rho", repr(float(model.rho))),
        ("converged", "1" if model.converged else "0"),
        ("trace", _floats(model.trace)),
        ("basis", basis_ref),
        ("seasons", encode_season_map(model.season_map)),
    ]
    payload = np.concatenate([model.q.ravel(), model.nu.ravel(), model.w_mean.ravel()])
    write_container(path, items, payload)


def read_model(path: Union[str, Path]) -> BglModel:
    """Load a model and the basis it references.

    Raises:
        ModelMissing: the model or its basis file does not exist
    """
    path = Path(path)
    if not path.exists():
        raise ModelMissing(f"No fitted model at {path}")
    header, payload = read_container(path)
    if header.get("kind") != "bgl-model":
        raise MalformedHeader(f"{path}: not a bgl-model file")
    try:
        nproc, nlev = int(header["nproc"]), int(header["nlevels"])
        nbasis, npix = int(header["nbasis"]), int(header["npix"])
        tau2 = _parse_floats(header["tau2"])
        lam, rho = float(header["lambda"]), float(header["rho"])
        trace = tuple(_parse_floats(header.get("trace", "")))
        basis_path = path.parent / header["basis"]
    except (KeyError, ValueError) as err:
        raise MalformedHeader(f"{path}: bad model header ({err})") from err
    if not basis_path.exists():
        raise ModelMissing(f"{path}: referenced basis {basis_path} does not exist")
    basis, _ = read_basis(basis_path)

    sizes = [nlev * nproc * nproc, nproc * (nbasis - nlev), npix]
    if payload.size != sum(sizes) or basis.nstoch != nlev or basis.npix != npix:
        raise DimensionMismatch(f"{path}: payload or basis does not match header dimensions")
    q_flat, nu_flat, w_mean = np.split(payload, np.cumsum(sizes)[:-1])
    season_map = decode_season_map(header["seasons"]) if "seasons" in header else DEFAULT_SEASON_MAP
    return BglModel(
        q=q_flat.reshape(nlev, nproc, nproc), tau2=tau2, lam=lam, rho=rho, basis=basis,
        season=header.get("season", ""), nu=nu_flat.reshape(nproc, nbasis - nlev), w_mean=w_mean,
        trace=trace, converged=header.get("converged", "1") == "1",
        season_map={k: tuple(v) for k, v in season_map.items()},
    )
