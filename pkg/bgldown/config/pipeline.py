#!/usr/bin/env python3
"""
Run and scenario configuration, loaded from one JSON document.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from bgldown.config.settings import DEFAULT_SEASON_MAP, DEFAULT_SEED, DEFAULT_THREADS
from bgldown.services.gridded_io import parse_month, validate_season_map
from bgldown.utils.errors import ConfigError, MalformedInput

logger = logging.getLogger(__name__)

PATH_FIELDS = ("coarse_path", "obs_path", "truth_path", "output_dir")


def _month(text: str) -> Tuple[int, int]:
    try:
        return parse_month(text)
    except MalformedInput as err:
        raise ValueError(str(err)) from err


def _default_season_map() -> Dict[str, List[int]]:
    return {k: list(v) for k, v in DEFAULT_SEASON_MAP.items()}


class ScenarioSpec(BaseModel):
    """Synthetic scenario drawn from the two-stage generative model."""
    coarse_ncols: int = Field(6, ge=2)
    coarse_nrows: int = Field(5, ge=2)
    factor: int = Field(4, ge=1)            # fine cells per coarse cell along each axis
    lon0: float = 145.0                     # centre of coarse cell (0, 0)
    lat0: float = -10.0
    coarse_dlon: float = Field(1.0, gt=0)
    coarse_dlat: float = -1.0
    start_year: int = 2000
    train_years: int = Field(10, ge=1)
    holdout_years: int = Field(3, ge=1)
    nstoch: int = Field(4, ge=1)
    omega_variance: float = Field(4.0, gt=0)
    decay: float = Field(0.6, gt=0)
    process2_scale: float = Field(1.0, gt=0)
    correlation: float = Field(0.9, gt=-1, lt=1)
    tau2: Tuple[float, float] = (0.002, 0.002)
    coarse_noise: float = Field(0.002, ge=0)
    bias: float = 0.5
    base: float = 26.0
    lon_gradient: float = 0.3
    lat_gradient: float = -0.4
    seasonal_amplitude: float = 2.0
    warming_per_year: float = 0.02
    seed: int = DEFAULT_SEED
    season_map: Dict[str, List[int]] = Field(default_factory=_default_season_map)

    @field_validator("tau2")
    @classmethod
    def positive_noise(cls, value):
        if min(value) <= 0:
            raise ValueError("tau2 entries must be positive")
        return value

    @model_validator(mode="after")
    def basis_fits_grid(self):
        if self.nstoch + 1 > self.coarse_ncols * self.coarse_nrows:
            raise ValueError("nstoch + 1 must not exceed the number of coarse cells")
        return self


class SplitConfig(BaseModel):
    kind: Literal["fixed", "variance"] = "variance"
    value: float = 0.95


class SolverConfig(BaseModel):
    tol: float = Field(1e-6, gt=0)
    max_outer: int = Field(50, ge=1)
    inner_tol: float = Field(1e-8, gt=0)
    inner_max: int = Field(2000, ge=1)
    eig_floor: float = Field(1e-8, gt=0)
    tau_floor: float = Field(1e-8, gt=0)
    noise_projection: Literal["full", "stochastic"] = "full"


class PipelineConfig(BaseModel):
    coarse_path: str = "coarse.gsf"
    obs_path: str = "obs.gsf"
    truth_path: Optional[str] = None
    output_dir: str = "out"
    train_end: str
    holdout_start: Optional[str] = None
    holdout_end: Optional[str] = None
    season_map: Dict[str, List[int]] = Field(default_factory=_default_season_map)
    climatology_group: Literal["month", "season"] = "month"
    eof_source: Literal["obs", "pooled"] = "obs"
    split: SplitConfig = Field(default_factory=SplitConfig)
    penalties: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0)])
    cv_folds: int = Field(5, ge=2)
    stage2: bool = True
    nugget_in_sd: bool = True
    omega1_mode: Literal["posterior", "gls"] = "posterior"
    ssim_bounds: Optional[Tuple[int, int, int, int]] = None
    ssim_window: int = Field(8, ge=1)
    ssim_pooled_range: bool = False
    solver: SolverConfig = Field(default_factory=SolverConfig)
    seed: int = DEFAULT_SEED
    threads: int = Field(DEFAULT_THREADS, ge=1)

    @field_validator("train_end", "holdout_start", "holdout_end")
    @classmethod
    def month_format(cls, value):
        if value is not None:
            _month(value)
        return value

    @field_validator("season_map")
    @classmethod
    def season_map_covers_year(cls, value):
        try:
            validate_season_map(value)
        except MalformedInput as err:
            raise ValueError(str(err)) from err
        return value

    @field_validator("penalties")
    @classmethod
    def penalties_valid(cls, value):
        if not value:
            raise ValueError("penalties must list at least one (lambda, rho) pair")
        if any(lam < 0 or rho < 0 for lam, rho in value):
            raise ValueError("penalties must be non-negative")
        return value

    @model_validator(mode="after")
    def holdout_after_training(self):
        if self.holdout_start is not None and _month(self.holdout_start) <= _month(self.train_end):
            raise ValueError("hold-out window must start after train_end")
        if self.holdout_start and self.holdout_end and _month(self.holdout_end) < _month(self.holdout_start):
            raise ValueError("holdout_end precedes holdout_start")
        return self

    @property
    def train_end_month(self) -> Tuple[int, int]:
        return _month(self.train_end)

    def holdout_window(self) -> Tuple[Optional[Tuple[int, int]], Optional[Tuple[int, int]]]:
        start = _month(self.holdout_start) if self.holdout_start else None
        end = _month(self.holdout_end) if self.holdout_end else None
        return start, end


def load_config(path, **overrides) -> PipelineConfig:
    """Load a JSON run config; relative paths resolve against its directory.

    Raises:
        ConfigError: unreadable file, bad JSON or failed validation
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as err:
        raise ConfigError(f"Cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"Config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must be a JSON object")

    data.update({k: v for k, v in overrides.items() if v is not None})
    for key in PATH_FIELDS:
        if data.get(key) and not Path(data[key]).is_absolute():
            data[key] = str((path.parent / data[key]).resolve())
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"Invalid config {path}: {err}") from err
    logger.debug(f"Loaded config {path}")
    return config


def save_resolved(config: PipelineConfig, directory) -> Path:
    """Echo every resolved setting to <directory>/config.resolved.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "config.resolved.json"
    with open(target, "w") as f:
        json.dump(config.model_dump(), f, indent=2, sort_keys=True)
    return target


def load_scenario(path, seed: Optional[int] = None) -> Tuple[ScenarioSpec, Path, Dict]:
    """Load a simulate config: {"scenario": {...}, "output_dir": ..., "pipeline": {...}}.

    Returns:
        (scenario spec, output directory, overrides for the generated pipeline.json)

    Raises:
        ConfigError: unreadable file, bad JSON or failed validation
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as err:
        raise ConfigError(f"Cannot read scenario config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"Scenario config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"Scenario config {path} must be a JSON object")

    scenario = dict(data.get("scenario", {}))
    if seed is not None:
        scenario["seed"] = seed
    output_dir = Path(data.get("output_dir", "scenario"))
    if not output_dir.is_absolute():
        output_dir = (path.parent / output_dir).resolve()
    try:
        spec = ScenarioSpec.model_validate(scenario)
    except ValidationError as err:
        raise ConfigError(f"Invalid scenario in {path}: {err}") from err
    return spec, output_dir, dict(data.get("pipeline", {}))
