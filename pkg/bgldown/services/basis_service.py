#!/usr/bin/env python3
"""
EOF basis for the Stage-2 residual model.

The training residual matrix is centred over time, its left singular
vectors are the EOFs, and the leading L columns (stochastic, phi) are split
from the remainder (deterministic, psi). The removed time mean is what the
deterministic coefficients nu describe.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from bgldown.config.settings import DEFAULT_SEED
from bgldown.services.gridded_io import (
    FineField,
    GridSpec,
    Month,
    encode_mask,
    grid_from_header,
    read_container,
    write_container,
)
from bgldown.utils.errors import (
    DimensionMismatch,
    InsufficientData,
    InvalidRule,
    MalformedHeader,
    MalformedInput,
)
from bgldown.utils.helpers import sign_normalize_columns

logger = logging.getLogger(__name__)

EOF_SOURCES = ("obs", "pooled")


@dataclass(frozen=True)
class ResidualPair:
    """Training residuals of one season.

    e1: interpolated model minus its pooled seasonal training mean
    e2: observation minus Stage-1 trend
    """
    e1: np.ndarray = field(repr=False)
    e2: np.ndarray = field(repr=False)
    season: str
    w_mean: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        e1 = np.asarray(self.e1, dtype=np.float64)
        e2 = np.asarray(self.e2, dtype=np.float64)
        if e1.ndim != 2 or e2.ndim != 2 or e1.shape != e2.shape:
            raise DimensionMismatch(f"residual shapes differ: e1 {e1.shape}, e2 {e2.shape}")
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)

    @property
    def ntrain(self) -> int:
        return self.e1.shape[0]

    @property
    def npix(self) -> int:
        return self.e1.shape[1]

    def stacked(self) -> np.ndarray:
        """Residual samples shaped (months, processes, pixels)."""
        return np.stack([self.e1, self.e2], axis=1)

    def rows(self, positions) -> "ResidualPair":
        return ResidualPair(self.e1[positions], self.e2[positions], self.season, self.w_mean)


@dataclass(frozen=True)
class BasisSet:
    """Orthonormal EOF columns split into stochastic phi and deterministic psi."""
    phi: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    singular_values: np.ndarray = field(repr=False)
    rank: int = 0
    season: str = ""

    @property
    def nstoch(self) -> int:
        return self.phi.shape[1]

    @property
    def total(self) -> int:
        return self.phi.shape[1] + self.psi.shape[1]

    @property
    def npix(self) -> int:
        return self.phi.shape[0]

    @property
    def full(self) -> np.ndarray:
        return np.hstack([self.phi, self.psi])

    def variance_explained(self) -> np.ndarray:
        energy = self.singular_values ** 2
        total = energy.sum()
        return energy / total if total > 0 else np.zeros_like(energy)

    def permuted(self, order: np.ndarray) -> "BasisSet":
        """Same basis with pixel rows reordered."""
        return BasisSet(self.phi[order], self.psi[order], self.singular_values, self.rank, self.season)


@dataclass(frozen=True)
class DeterministicFit:
    """OLS coefficients nu[j, l] of the time-mean residual on psi."""
    nu: np.ndarray

    def term(self, basis: BasisSet, process: int) -> np.ndarray:
        if basis.psi.shape[1] == 0:
            return np.zeros(basis.npix)
        return basis.psi @ self.nu[process]


@dataclass(frozen=True)
class SplitRule:
    """Either fixed-L or variance-threshold selection of the stochastic columns."""
    kind: str
    value: float

    @classmethod
    def fixed(cls, nstoch: int) -> "SplitRule":
        return cls("fixed", nstoch)

    @classmethod
    def variance(cls, fraction: float) -> "SplitRule":
        return cls("variance", fraction)


def build_residuals(w: FineField, obs: FineField, trend: FineField, season: str, train_end: Month) -> ResidualPair:
    """Assemble e1/e2 over the training months of one season.

    Args:
        w: Interpolated model field (all months)
        obs: Fine observations
        trend: Stage-1 trend over the model months
        season: Season name
        train_end: Last training month

    Returns:
        ResidualPair with rows ordered like the observation time index
    """
    if not (w.spec.same_layout(obs.spec) and w.spec.same_layout(trend.spec)):
        raise DimensionMismatch("Residual inputs must share one fine grid")
    obs_pos = obs.time.season_positions(season, until=train_end)
    if obs_pos.size == 0:
        raise InsufficientData(f"No training months for season {season}")
    months = [obs.time.entries[i] for i in obs_pos]
    w_pos = [w.time.index_of(m) for m in months]
    t_pos = [trend.time.index_of(m) for m in months]
    if min(w_pos) < 0 or min(t_pos) < 0:
        raise DimensionMismatch(f"Model field does not cover the {season} training months")

    w_train = w.values[w_pos]
    w_mean = w_train.mean(axis=0)
    e1 = w_train - w_mean
    e2 = obs.values[obs_pos] - trend.values[t_pos]
    logger.debug(f"Residuals for {season}: {len(months)} training months, {w.spec.active_count} pixels")
    return ResidualPair(e1, e2, season, w_mean)


def future_e1(w_month: np.ndarray, w_mean: np.ndarray) -> np.ndarray:
    """Model residual of any month relative to the pooled seasonal training mean."""
    return np.asarray(w_month, dtype=np.float64) - w_mean


def _complete_orthonormal(columns: np.ndarray, total: int, seed: int) -> np.ndarray:
    """Extend orthonormal columns to `total` orthonormal columns."""
    n, have = columns.shape
    if have >= total:
        return columns[:, :total]
    rng = np.random.default_rng(seed)
    block = np.hstack([columns, rng.standard_normal((n, total - have))])
    q, r = linalg.qr(block, mode="economic")
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    q[:, :have] = columns
    return q


def compute_eofs(residuals: ResidualPair, source: str = "obs", seed: int = DEFAULT_SEED) -> BasisSet:
    """All T EOFs of the time-centred training residuals.

    Time-centring removes one dimension, so the rank is at most T-1 and the
    last column always comes from the seeded completion. Completed columns
    carry zero singular value and land in psi under any split with L < T.

    Args:
        residuals: Training residual pair
        source: 'obs' uses e2, 'pooled' stacks e1 and e2 over time
        seed: Seed of the Gaussian block that completes the basis

    Returns:
        BasisSet whose phi holds all T columns (psi empty); split afterwards

    Raises:
        InsufficientData: fewer than 2 months or fewer pixels than months
    """
    if source not in EOF_SOURCES:
        raise MalformedInput(f"Unknown EOF source \"{source}\" - expected one of {EOF_SOURCES}")
    ntrain, npix = residuals.ntrain, residuals.npix
    if ntrain < 2:
        raise InsufficientData(f"EOFs need at least 2 training months, got {ntrain}")
    if npix < ntrain:
        raise InsufficientData(f"EOFs need n >= T, got n={npix}, T={ntrain}")

    data = residuals.e2 if source == "obs" else np.vstack([residuals.e1, residuals.e2])
    centred = data - data.mean(axis=0)
    u, s, _ = linalg.svd(centred.T, full_matrices=False, check_finite=False)
    u, s = u[:, :ntrain], s[:ntrain]

    tol = s.max(initial=0.0) * max(npix, data.shape[0]) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    eofs = sign_normalize_columns(u[:, :rank])
    eofs = _complete_orthonormal(eofs, ntrain, seed)
    singular_values = np.where(np.arange(ntrain) < rank, s, 0.0)
    if rank < ntrain - 1:
        logger.info(f"EOFs for {residuals.season}: rank {rank} < T-1={ntrain - 1}; trailing columns completed")
    else:
        logger.debug(f"EOFs for {residuals.season}: rank {rank}, {ntrain - rank} column(s) completed")
    return BasisSet(eofs, np.zeros((npix, 0)), singular_values, rank, residuals.season)


def split_basis(full: BasisSet, rule: SplitRule) -> BasisSet:
    """Leading L columns become stochastic (phi), the rest deterministic (psi).

    Raises:
        InvalidRule: L outside [1, T] or fraction outside (0, 1]
    """
    columns = full.full
    total = columns.shape[1]
    if rule.kind == "fixed":
        nstoch = int(rule.value)
        if nstoch != rule.value or not 1 <= nstoch <= total:
            raise InvalidRule(f"fixed-L({rule.value}) outside 1..{total}")
    elif rule.kind == "variance":
        fraction = float(rule.value)
        if not 0.0 < fraction <= 1.0:
            raise InvalidRule(f"variance-threshold({fraction}) outside (0, 1]")
        cumulative = np.cumsum(full.variance_explained())
        reached = np.flatnonzero(cumulative >= fraction - 1e-12)
        nstoch = int(reached[0]) + 1 if reached.size else total
        nstoch = max(1, nstoch)
    else:
        raise InvalidRule(f"Unknown split rule \"{rule.kind}\"")
    logger.info(f"Basis split for {full.season or 'season'}: L={nstoch} stochastic of T={total}")
    return BasisSet(columns[:, :nstoch], columns[:, nstoch:], full.singular_values, full.rank, full.season)


def fit_deterministic(residuals: ResidualPair, basis: BasisSet) -> DeterministicFit:
    """nu_j = psi^T ebar_j, the OLS fit of each process' time-mean residual."""
    if residuals.npix != basis.npix:
        raise DimensionMismatch(f"residuals have {residuals.npix} pixels, basis {basis.npix}")
    means = np.vstack([residuals.e1.mean(axis=0), residuals.e2.mean(axis=0)])
    if basis.psi.shape[1] == 0:
        return DeterministicFit(np.zeros((2, 0)))
    return DeterministicFit(means @ basis.psi)


def stochastic_residuals(residuals: ResidualPair, basis: BasisSet, fit: DeterministicFit) -> np.ndarray:
    """Training samples (months, 2, pixels) with the deterministic term removed."""
    samples = residuals.stacked()
    for j in range(2):
        samples[:, j, :] -= fit.term(basis, j)
    return samples


def write_basis(basis: BasisSet, grid: GridSpec, path: Union[str, Path]) -> None:
    items = [("kind", "basis")]
    items += grid.header_items()
    items += [
        ("nbasis", str(basis.total)),
        ("nstoch", str(basis.nstoch)),
        ("rank", str(basis.rank)),
        ("singular_values", ",".join(repr(float(s)) for s in basis.singular_values)),
        ("season", basis.season),
        ("mask", encode_mask(grid.mask)),
    ]
    write_container(path, items, basis.full.T)


def read_basis(path: Union[str, Path]) -> Tuple[BasisSet, GridSpec]:
    header, payload = read_container(path)
    if header.get("kind") != "basis":
        raise MalformedHeader(f"{path}: not a basis file")
    grid = grid_from_header(header, "fine", path)
    try:
        total, nstoch, rank = int(header["nbasis"]), int(header["nstoch"]), int(header["rank"])
        singular_values = np.array([float(s) for s in header["singular_values"].split(",") if s])
    except (KeyError, ValueError) as err:
        raise MalformedHeader(f"{path}: bad basis header ({err})") from err
    if payload.size != total * grid.active_count:
        raise DimensionMismatch(f"{path}: payload has {payload.size} values, expected {total * grid.active_count}")
    columns = payload.reshape(total, grid.active_count).T
    basis = BasisSet(columns[:, :nstoch].copy(), columns[:, nstoch:].copy(), singular_values, rank,
                     header.get("season", ""))
    return basis, grid
