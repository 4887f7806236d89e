#!/usr/bin/env python3
"""
Validation metrics: MSE by season/overall/pixel, windowed SSIM over a
regular sub-grid, MSE ratio maps and the CSV/map report.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from bgldown.services.gridded_io import (
    FineField,
    GridSpec,
    encode_mask,
    grid_from_header,
    read_container,
    write_container,
)
from bgldown.utils.errors import (
    MalformedHeader,
    MalformedInput,
    MaskedPixel,
    ShapeMismatch,
    WindowTooLarge,
)

logger = logging.getLogger(__name__)

GROUPINGS = ("overall", "season", "pixel")
REDUCTION_BASELINES = ("Standard", "GCM")
REPORT_COLUMNS = ["method", "season", "n_months", "mse", "ssim"] + [f"pct_reduction_vs_{b}" for b in REDUCTION_BASELINES]
OVERALL = "overall"
K1, K2 = 0.01, 0.03

# Row/column bounds of the SSIM sub-grid, half-open: (row0, row1, col0, col1)
Bounds = Tuple[int, int, int, int]


@dataclass(frozen=True)
class RatioMap:
    """Elementwise a/b; `flagged` marks b = 0 with a > 0 (value +inf)."""
    values: np.ndarray
    flagged: np.ndarray


@dataclass
class ValidationReport:
    grid: GridSpec
    rows: List[Dict] = field(default_factory=list)
    pixel_mse: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    ratios: Dict[str, RatioMap] = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def value(self, method: str, season: str = OVERALL, column: str = "mse") -> float:
        for row in self.rows:
            if row["method"] == method and row["season"] == season:
                return row[column]
        raise KeyError(f"{method}/{season}")


def _check_pair(pred: FineField, truth: FineField) -> None:
    if not pred.spec.same_layout(truth.spec):
        raise ShapeMismatch("prediction and truth grids differ")
    if pred.time.entries != truth.time.entries:
        raise ShapeMismatch("prediction and truth cover different months")


def mse(pred: FineField, truth: FineField, groupby: str = OVERALL):
    """Mean squared error.

    Returns:
        float for 'overall', {season: float} for 'season' (seasons present,
        canonical order), per-pixel array for 'pixel'

    Raises:
        ShapeMismatch: grids or time indices differ
    """
    if groupby not in GROUPINGS:
        raise MalformedInput(f"groupby must be one of {GROUPINGS}")
    _check_pair(pred, truth)
    squared = (pred.values - truth.values) ** 2
    if groupby == OVERALL:
        return float(squared.mean())
    if groupby == "pixel":
        return squared.mean(axis=0)
    out = {}
    for season in truth.time.seasons():
        positions = truth.time.season_positions(season)
        if positions.size:
            out[season] = float(squared[positions].mean())
    return out


def extract_window(fld: FineField, t: int, bounds: Optional[Bounds] = None) -> np.ndarray:
    """2-D sub-grid of month t; every cell inside must be active.

    Raises:
        MaskedPixel: the window contains a masked cell
    """
    full = fld.month_map(t)
    if bounds is None:
        bounds = (0, fld.spec.nrows, 0, fld.spec.ncols)
    row0, row1, col0, col1 = bounds
    if not (0 <= row0 < row1 <= fld.spec.nrows and 0 <= col0 < col1 <= fld.spec.ncols):
        raise MalformedInput(f"SSIM bounds {bounds} outside the {fld.spec.nrows}x{fld.spec.ncols} grid")
    window = full[row0:row1, col0:col1]
    if np.isnan(window).any():
        r, c = np.argwhere(np.isnan(window))[0]
        raise MaskedPixel(f"SSIM window contains masked cell (row {row0 + r}, col {col0 + c})")
    return window


def ssim(pred_map: np.ndarray, truth_map: np.ndarray, window: int = 8, pooled_range: bool = False) -> float:
    """Mean structural similarity over all window x window patches, stride 1.

    C1 = (0.01 R)^2, C2 = (0.03 R)^2 with R the data range of the truth map,
    or of both maps together when `pooled_range` is set. Moments are
    population moments.

    Raises:
        ShapeMismatch: maps differ in shape
        MaskedPixel: a map holds NaN
        WindowTooLarge: window exceeds a map dimension
    """
    x = np.asarray(pred_map, dtype=np.float64)
    y = np.asarray(truth_map, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ShapeMismatch(f"SSIM maps must be equal 2-D shapes, got {x.shape} and {y.shape}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise MaskedPixel("SSIM maps must be fully unmasked")
    if window > min(x.shape):
        raise WindowTooLarge(f"window {window} exceeds map shape {x.shape}")

    span = np.ptp(np.concatenate([x.ravel(), y.ravel()])) if pooled_range else np.ptp(y)
    span = span if span > 0 else 1.0
    c1, c2 = (K1 * span) ** 2, (K2 * span) ** 2

    xw = sliding_window_view(x, (window, window))
    yw = sliding_window_view(y, (window, window))
    mx, my = xw.mean(axis=(2, 3)), yw.mean(axis=(2, 3))
    vx = ((xw - mx[..., None, None]) ** 2).mean(axis=(2, 3))
    vy = ((yw - my[..., None, None]) ** 2).mean(axis=(2, 3))
    cxy = ((xw - mx[..., None, None]) * (yw - my[..., None, None])).mean(axis=(2, 3))
    index = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(index.mean())


def mse_ratio_map(a: np.ndarray, b: np.ndarray) -> RatioMap:
    """a / b with 0/0 -> 1 and a > 0, b = 0 -> +inf (flagged)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ratio maps differ in shape: {a.shape} vs {b.shape}")
    zero = b == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(zero, np.where(a == 0, 1.0, np.inf), a / np.where(zero, 1.0, b))
    flagged = zero & (a > 0)
    if flagged.any():
        logger.warning(f"{int(flagged.sum())} ratio pixels have a zero denominator")
    return RatioMap(values, flagged)


def percent_reduction(value: float, reference: Optional[float]) -> float:
    """100 * (1 - value / reference); NaN without a positive reference MSE."""
    if reference is None or not reference > 0:
        return float("nan")
    return 100.0 * (1.0 - value / reference)


def monthly_ssim(pred: FineField, truth: FineField, bounds: Optional[Bounds] = None,
                 window: int = 8, pooled_range: bool = False) -> np.ndarray:
    _check_pair(pred, truth)
    return np.array([
        ssim(extract_window(pred, t, bounds), extract_window(truth, t, bounds), window, pooled_range)
        for t in range(len(truth.time))
    ])


def build_report(truth: FineField, predictions: Mapping[str, FineField], bounds: Optional[Bounds] = None,
                 window: int = 8, pooled_range: bool = False, ssim_enabled: bool = True,
                 ratio_pairs: Sequence[Tuple[str, str]] = ()) -> ValidationReport:
    """Score each method per season and overall against held-out truth."""
    report = ValidationReport(truth.spec)
    seasons = [s for s in truth.time.seasons() if truth.time.season_positions(s).size]
    for method, pred in predictions.items():
        by_season = mse(pred, truth, "season")
        scores = monthly_ssim(pred, truth, bounds, window, pooled_range) if ssim_enabled else None
        for season in seasons + [OVERALL]:
            if season == OVERALL:
                positions = np.arange(len(truth.time))
                value = mse(pred, truth)
            else:
                positions = truth.time.season_positions(season)
                value = by_season[season]
            report.rows.append({
                "method": method,
                "season": season,
                "n_months": int(positions.size),
                "mse": value,
                "ssim": float(scores[positions].mean()) if scores is not None else float("nan"),
            })
        report.pixel_mse[method] = mse(pred, truth, "pixel")
    scored = {(row["method"], row["season"]): row["mse"] for row in report.rows}
    for row in report.rows:
        for baseline in REDUCTION_BASELINES:
            reference = scored.get((baseline, row["season"]))
            row[f"pct_reduction_vs_{baseline}"] = percent_reduction(row["mse"], reference)
    for top, bottom in ratio_pairs:
        if top in report.pixel_mse and bottom in report.pixel_mse:
            report.ratios[f"{top}_over_{bottom}"] = mse_ratio_map(report.pixel_mse[top], report.pixel_mse[bottom])
    return report


def write_map(values: np.ndarray, grid: GridSpec, path: Union[str, Path], name: str) -> None:
    """One active-cell map as `kind=map`; unlike fields, +inf is allowed."""
    items = [("kind", "map"), ("name", name)] + grid.header_items() + [("mask", encode_mask(grid.mask))]
    write_container(path, items, np.asarray(values, dtype=np.float64))


def read_map(path: Union[str, Path]) -> Tuple[np.ndarray, GridSpec]:
    header, payload = read_container(path)
    if header.get("kind") != "map":
        raise MalformedHeader(f"{path}: not a map file")
    grid = grid_from_header(header, "fine", path)
    if payload.size != grid.active_count:
        raise MalformedHeader(f"{path}: payload has {payload.size} values for {grid.active_count} cells")
    return payload, grid


def write_pgm(values: np.ndarray, grid: GridSpec, path: Union[str, Path]) -> None:
    """8-bit binary PGM heatmap; masked and non-finite cells are 0, data spans 1..255."""
    image = np.zeros(grid.ncols * grid.nrows, dtype=np.uint8)
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    if finite.any():
        lo, hi = values[finite].min(), values[finite].max()
        scaled = np.ones_like(values) if hi == lo else 1.0 + 254.0 * (values - lo) / (hi - lo)
        active = np.zeros_like(values, dtype=np.uint8)
        active[finite] = np.round(scaled[finite]).astype(np.uint8)
        image[grid.active_index] = active
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.ncols} {grid.nrows}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def write_report(report: ValidationReport, directory: Union[str, Path]) -> Path:
    """report.csv plus maps/<method>.mse.{gsf,pgm} and maps/<a>_over_<b>.ratio.{gsf,pgm}."""
    directory = Path(directory)
    maps = directory / "maps"
    maps.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "report.csv"
    report.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
    for method, values in report.pixel_mse.items():
        write_map(values, report.grid, maps / f"{method}.mse.gsf", f"{method} pixel MSE")
        write_pgm(values, report.grid, maps / f"{method}.mse.pgm")
    for name, ratio in report.ratios.items():
        write_map(ratio.values, report.grid, maps / f"{name}.ratio.gsf", name)
        write_pgm(ratio.values, report.grid, maps / f"{name}.ratio.pgm")
    logger.info(f"Validation report written to {csv_path}")
    return csv_path
