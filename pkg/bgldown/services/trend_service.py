#!/usr/bin/env python3
"""
Stage 1: large-scale trend from model climatology, bilinear interpolation
and observational climatology.

    mu_hat_it(s) = ybar_i(s) + Interp(W_it - Wbar_i)(s)
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import sparse

from bgldown.services.gridded_io import (
    AnyField,
    CoarseField,
    FineField,
    GridSpec,
    Month,
    TimeIndex,
    decode_season_map,
    encode_mask,
    encode_season_map,
    format_month,
    grid_from_header,
    read_container,
    write_container,
)
from bgldown.utils.errors import (
    DimensionMismatch,
    EmptyGroup,
    GroupMismatch,
    MalformedHeader,
    MalformedInput,
    MissingNeighbor,
    OutOfDomain,
)

logger = logging.getLogger(__name__)

GROUPINGS = ("month", "season")

# Fine pixels may sit up to half a coarse cell beyond the outermost centres
EDGE_MARGIN = 0.5
_EDGE_EPS = 1e-9

GroupKey = Union[int, str]


@dataclass(frozen=True)
class Climatology:
    """Per-group temporal means [group x active cells]."""
    grid: GridSpec
    group: str
    keys: Tuple[GroupKey, ...]
    means: np.ndarray = field(repr=False, compare=False)
    season_map: Mapping[str, Tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.group not in GROUPINGS:
            raise MalformedInput(f"Unknown grouping \"{self.group}\"")
        means = np.array(self.means, dtype=np.float64)
        if means.shape != (len(self.keys), self.grid.active_count):
            raise DimensionMismatch(f"climatology means shape {means.shape} != ({len(self.keys)}, {self.grid.active_count})")
        means.setflags(write=False)
        object.__setattr__(self, "means", means)

    def key_of(self, entry: Month, time: TimeIndex) -> GroupKey:
        return entry[1] if self.group == "month" else time.season_of(entry[1])

    def rows_for(self, time: TimeIndex) -> np.ndarray:
        """Row index into `means` for every entry of a time index.

        Raises:
            GroupMismatch: a time entry has no climatology row
        """
        lookup = {k: i for i, k in enumerate(self.keys)}
        rows = []
        for entry in time.entries:
            key = self.key_of(entry, time)
            if key not in lookup:
                raise GroupMismatch(f"No {self.group} climatology for {format_month(entry)} (group {key!r})")
            rows.append(lookup[key])
        return np.array(rows, dtype=int)


def _group_keys(time: TimeIndex, group: str, positions: Iterable[int]) -> List[GroupKey]:
    if group == "month":
        return [time.entries[i][1] for i in positions]
    return [time.season_of(time.entries[i][1]) for i in positions]


def _ordered_keys(present: Iterable[GroupKey], group: str, time: TimeIndex) -> Tuple[GroupKey, ...]:
    present = set(present)
    if group == "month":
        return tuple(sorted(present))
    return tuple(s for s in time.seasons() if s in present)


def climatology(fld: AnyField, group: str = "month", window_end: Optional[Month] = None,
                required: Optional[Iterable[GroupKey]] = None) -> Climatology:
    """Temporal mean of a field per calendar month or season.

    Args:
        fld: Coarse or fine field
        group: 'month' or 'season'
        window_end: Only time entries <= window_end contribute (training window)
        required: Group keys that must be present after windowing

    Returns:
        Climatology with one row per group present in the window

    Raises:
        EmptyGroup: the window is empty or a required group has no entries
    """
    if group not in GROUPINGS:
        raise MalformedInput(f"Unknown grouping \"{group}\" - expected one of {GROUPINGS}")
    positions = [i for i, e in enumerate(fld.time.entries) if window_end is None or e <= window_end]
    if not positions:
        raise EmptyGroup("No time entries fall inside the climatology window")
    keys_per_entry = _group_keys(fld.time, group, positions)
    keys = _ordered_keys(keys_per_entry, group, fld.time)
    for key in required or ():
        if key not in keys:
            raise EmptyGroup(f"{group} {key!r} has no entries in the climatology window")

    means = np.zeros((len(keys), fld.spec.active_count))
    for row, key in enumerate(keys):
        members = [p for p, k in zip(positions, keys_per_entry) if k == key]
        means[row] = fld.values[members].mean(axis=0)
    logger.debug(f"Climatology over {len(positions)} entries, {len(keys)} {group} groups")
    return Climatology(fld.spec, group, keys, means, dict(fld.time.season_map))


def climatology_anomaly(fld: AnyField, clim: Climatology) -> AnyField:
    """Subtract the matching climatology row from every time step."""
    if not fld.spec.same_layout(clim.grid):
        raise DimensionMismatch("Field and climatology grids differ")
    rows = clim.rows_for(fld.time)
    return type(fld)(fld.spec, fld.time, fld.values - clim.means[rows])


def _axis_weights(coord: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower index, upper index and fractional offset along one axis."""
    clamped = np.clip(coord, 0.0, count - 1.0)
    if count == 1:
        zeros = np.zeros(coord.shape, dtype=int)
        return zeros, zeros, np.zeros(coord.shape)
    lower = np.minimum(np.floor(clamped).astype(int), count - 2)
    return lower, lower + 1, clamped - lower


def interpolation_matrix(coarse_spec: GridSpec, fine_spec: GridSpec, strict: bool = False) -> sparse.csr_matrix:
    """Sparse bilinear operator mapping coarse active cells to fine active pixels.

    Args:
        coarse_spec: Grid whose active cell centres are the interpolation nodes
        fine_spec: Grid whose active pixel centres are the query points
        strict: Raise MissingNeighbor instead of renormalising over masked nodes

    Returns:
        csr_matrix of shape (n_fine_active, n_coarse_active); rows sum to 1

    Raises:
        OutOfDomain: a pixel lies beyond the half-cell margin, or all four
            neighbours are masked
        MissingNeighbor: strict mode and a needed neighbour is masked
    """
    lon, lat = fine_spec.coordinates()
    u = (lon - coarse_spec.lon0) / coarse_spec.dlon
    v = (lat - coarse_spec.lat0) / coarse_spec.dlat

    outside = (
        (u < -EDGE_MARGIN - _EDGE_EPS) | (u > coarse_spec.ncols - 1 + EDGE_MARGIN + _EDGE_EPS)
        | (v < -EDGE_MARGIN - _EDGE_EPS) | (v > coarse_spec.nrows - 1 + EDGE_MARGIN + _EDGE_EPS)
    )
    if outside.any():
        pixel = int(np.flatnonzero(outside)[0])
        raise OutOfDomain(
            f"fine pixel {pixel} at ({lon[pixel]:.6f}, {lat[pixel]:.6f}) lies beyond the coarse grid margin"
        )

    c0, c1, fu = _axis_weights(u, coarse_spec.ncols)
    r0, r1, fv = _axis_weights(v, coarse_spec.nrows)
    rows = np.stack([r0, r0, r1, r1], axis=1)
    cols = np.stack([c0, c1, c0, c1], axis=1)
    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)

    lookup = np.full(coarse_spec.ncols * coarse_spec.nrows, -1, dtype=int)
    lookup[coarse_spec.active_index] = np.arange(coarse_spec.active_count)
    position = lookup[rows * coarse_spec.ncols + cols]
    available = position >= 0

    needed = weights > 0
    if strict and (needed & ~available).any():
        pixel = int(np.flatnonzero((needed & ~available).any(axis=1))[0])
        raise MissingNeighbor(f"fine pixel {pixel} needs a masked coarse cell")

    none = ~available.any(axis=1)
    if none.any():
        pixel = int(np.flatnonzero(none)[0])
        raise OutOfDomain(f"all coarse neighbours of fine pixel {pixel} are masked")

    weights = np.where(available, weights, 0.0)
    totals = weights.sum(axis=1)
    degenerate = totals <= 1e-14
    for pixel in np.flatnonzero(degenerate):
        # Query sits on a masked node: equal weight over distinct available neighbours
        distinct = {}
        for k in np.flatnonzero(available[pixel]):
            distinct.setdefault(position[pixel, k], k)
        weights[pixel] = 0.0
        for k in distinct.values():
            weights[pixel, k] = 1.0 / len(distinct)
    totals = weights.sum(axis=1)
    weights = weights / totals[:, None]

    n = fine_spec.active_count
    row_index = np.repeat(np.arange(n), 4)
    keep = available.ravel()
    matrix = sparse.coo_matrix(
        (weights.ravel()[keep], (row_index[keep], np.where(available, position, 0).ravel()[keep])),
        shape=(n, coarse_spec.active_count),
    ).tocsr()
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} fine pixels fall on masked coarse nodes; using neighbour means")
    return matrix


def interpolate_bilinear(coarse: CoarseField, fine_spec: GridSpec, strict: bool = False) -> FineField:
    """Bilinear interpolation of every time step onto fine pixel centres."""
    operator = interpolation_matrix(coarse.spec, fine_spec, strict=strict)
    values = (operator @ coarse.values.T).T
    return FineField(fine_spec.with_kind("fine"), coarse.time, values)


def estimate_trend(model: CoarseField, obs_clim: Climatology, model_clim: Climatology,
                   fine_spec: GridSpec) -> FineField:
    """mu_hat = obs climatology + Interp(model - model climatology), every model month.

    Raises:
        GroupMismatch: climatologies use different groupings or lack a month
        DimensionMismatch: climatology grids do not match their fields
    """
    if obs_clim.group != model_clim.group:
        raise GroupMismatch(f"obs climatology grouped by {obs_clim.group}, model by {model_clim.group}")
    if not obs_clim.grid.same_layout(fine_spec):
        raise DimensionMismatch("Observational climatology is not on the fine grid")
    if not model_clim.grid.same_layout(model.spec):
        raise DimensionMismatch("Model climatology is not on the model grid")

    model_rows = model_clim.rows_for(model.time)
    obs_rows = obs_clim.rows_for(model.time)
    anomaly = CoarseField(model.spec, model.time, model.values - model_clim.means[model_rows])
    interpolated = interpolate_bilinear(anomaly, fine_spec)
    logger.info(f"Trend estimated for {len(model.time)} months on {fine_spec.active_count} pixels")
    return FineField(interpolated.spec, model.time, interpolated.values + obs_clim.means[obs_rows])


def write_climatology(clim: Climatology, path: Union[str, Path]) -> None:
    items = [("kind", "climatology"), ("grid", clim.grid.kind)]
    items += clim.grid.header_items()
    items += [
        ("group", clim.group),
        ("keys", ",".join(str(k) for k in clim.keys)),
        ("mask", encode_mask(clim.grid.mask)),
        ("seasons", encode_season_map(clim.season_map)),
    ]
    write_container(path, items, clim.means)


def read_climatology(path: Union[str, Path]) -> Climatology:
    header, payload = read_container(path)
    if header.get("kind") != "climatology":
        raise MalformedHeader(f"{path}: not a climatology file")
    grid = grid_from_header(header, header.get("grid", "fine"), path)
    group = header.get("group", "month")
    raw_keys = [k for k in header.get("keys", "").split(",") if k]
    try:
        keys = tuple(int(k) for k in raw_keys) if group == "month" else tuple(raw_keys)
    except ValueError as err:
        raise MalformedHeader(f"{path}: bad climatology keys \"{header.get('keys')}\"") from err
    expected = len(keys) * grid.active_count
    if payload.size != expected:
        raise DimensionMismatch(f"{path}: payload has {payload.size} values, expected {expected}")
    season_map = decode_season_map(header.get("seasons", ""))
    return Climatology(grid, group, keys, payload.reshape(len(keys), grid.active_count), season_map)
