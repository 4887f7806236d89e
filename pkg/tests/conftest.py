import logging

import numpy as np
import pytest

from bgldown.config.settings import DEFAULT_SEASON_MAP
from bgldown.services.basis_service import BasisSet
from bgldown.services.bgl_service import BglModel
from bgldown.services.gridded_io import FineField, GridSpec, TimeIndex, month_range

logging.getLogger("bgldown").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd_blocks(rng, nlev, p=2, jitter=0.5):
    """Stack of nlev random p x p SPD matrices."""
    blocks = np.empty((nlev, p, p))
    for level in range(nlev):
        a = rng.standard_normal((p, p))
        blocks[level] = a @ a.T + jitter * np.eye(p)
    return blocks


def orthonormal_columns(rng, n, k):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def make_model(phi, q, tau2, season="summer", w_mean=None, lam=0.0, rho=0.0):
    """BglModel with an empty deterministic part, for prediction tests."""
    npix = phi.shape[0]
    basis = BasisSet(phi, np.zeros((npix, 0)), np.ones(phi.shape[1]), phi.shape[1], season)
    return BglModel(
        q=np.asarray(q, dtype=np.float64), tau2=np.asarray(tau2, dtype=np.float64), lam=lam, rho=rho,
        basis=basis, season=season, nu=np.zeros((2, 0)),
        w_mean=np.zeros(npix) if w_mean is None else w_mean,
    )


def fine_field(values, ncols, nrows, start=(2000, 1), mask=None, lon0=0.0, lat0=0.0, dlon=1.0, dlat=1.0,
               season_map=None):
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(ncols * nrows, dtype=bool) if mask is None else mask
    grid = GridSpec("fine", lon0, lat0, dlon, dlat, ncols, nrows, mask)
    months = month_range(start, _advance(start, values.shape[0] - 1))
    time = TimeIndex(tuple(months), season_map or DEFAULT_SEASON_MAP)
    return FineField(grid, time, values)


def _advance(start, count):
    index = start[0] * 12 + start[1] - 1 + count
    return index // 12, index % 12 + 1
