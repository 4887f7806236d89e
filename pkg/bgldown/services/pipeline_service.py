#!/usr/bin/env python3
"""
Pipeline service orchestrating simulate, fit, predict and validate from a
run configuration. Artifacts live under the configured output directory.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bgldown.config.pipeline import PipelineConfig, ScenarioSpec, save_resolved
from bgldown.services import bgl_service
from bgldown.services.basis_service import (
    SplitRule,
    build_residuals,
    compute_eofs,
    split_basis,
    write_basis,
)
from bgldown.services.bgl_service import BglModel, BglOptions
from bgldown.services.gridded_io import (
    CoarseField,
    FineField,
    Month,
    TimeIndex,
    format_month,
    next_month,
    read_field,
)
from bgldown.services.metrics_service import ValidationReport, build_report, write_report
from bgldown.services.predict_service import DownscaledField, downscale, write_downscaled
from bgldown.services.synthetic_service import generate, write_scenario
from bgldown.services.trend_service import (
    Climatology,
    climatology,
    estimate_trend,
    interpolate_bilinear,
    read_climatology,
    write_climatology,
)
from bgldown.utils.errors import (
    ConfigError,
    DownscalingError,
    MalformedInput,
    ModelMissing,
    MonthOutOfRange,
)
from bgldown.utils.helpers import file_digest

logger = logging.getLogger(__name__)

RATIO_PAIRS = (("BGL", "Standard"), ("BGL", "GCM"), ("Standard", "GCM"))


@dataclass(frozen=True)
class ArtifactLayout:
    """Where each artifact of a run lives."""
    root: Path

    @property
    def model_clim(self) -> Path:
        return self.root / "trend" / "model-clim.gsf"

    @property
    def obs_clim(self) -> Path:
        return self.root / "trend" / "obs-clim.gsf"

    def basis(self, season: str) -> Path:
        return self.root / "models" / f"{season}.basis.gsf"

    def model(self, season: str) -> Path:
        return self.root / "models" / f"{season}.bgl"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions"

    @property
    def validation(self) -> Path:
        return self.root / "validation"


@dataclass
class FitSummary:
    seasons: List[str] = field(default_factory=list)
    penalties: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    problems: List[str] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)

    @property
    def invariants_ok(self) -> bool:
        return not self.problems


@dataclass(frozen=True)
class StageOne:
    coarse: CoarseField
    w: FineField
    trend: FineField


def _with_seasons(fld, season_map):
    """Re-key a field's time index to the run's season map."""
    return type(fld)(fld.spec, TimeIndex(fld.time.entries, season_map), fld.values)


def _in_context(err: DownscalingError, context: str) -> DownscalingError:
    wrapped = type(err)(f"{context}: {err}")
    wrapped.__cause__ = err
    return wrapped


class PipelineService:
    """Service running the downscaling pipeline commands"""

    @staticmethod
    def layout(config: PipelineConfig) -> ArtifactLayout:
        return ArtifactLayout(Path(config.output_dir))

    @staticmethod
    def solver_options(config: PipelineConfig) -> BglOptions:
        return BglOptions(**config.solver.model_dump())

    @staticmethod
    def split_rule(config: PipelineConfig) -> SplitRule:
        if config.split.kind == "fixed":
            return SplitRule.fixed(int(config.split.value))
        return SplitRule.variance(config.split.value)

    def read_inputs(self, config: PipelineConfig) -> Tuple[CoarseField, FineField]:
        coarse = read_field(config.coarse_path)
        obs = read_field(config.obs_path)
        if coarse.spec.kind != "coarse" or obs.spec.kind != "fine":
            raise MalformedInput("coarse_path must hold a coarse field and obs_path a fine field")
        return _with_seasons(coarse, config.season_map), _with_seasons(obs, config.season_map)

    @staticmethod
    def overlap(coarse: CoarseField, obs_train: FineField) -> CoarseField:
        """Model months that also carry training observations."""
        observed = set(obs_train.time.entries)
        positions = [i for i, e in enumerate(coarse.time.entries) if e in observed]
        if not positions:
            raise MalformedInput("Model and observation fields share no training months")
        return coarse.select(positions)

    def stage_one(self, config: PipelineConfig, coarse: CoarseField, obs_clim: Climatology,
                  model_clim: Climatology) -> StageOne:
        fine_spec = obs_clim.grid.with_kind("fine")
        w = interpolate_bilinear(coarse, fine_spec)
        trend = estimate_trend(coarse, obs_clim, model_clim, fine_spec)
        return StageOne(coarse, w, trend)

    def cmd_simulate(self, spec: ScenarioSpec, directory: Path,
                     pipeline_overrides: Optional[Dict] = None) -> Dict[str, Path]:
        """Generate a synthetic scenario and write it with a runnable pipeline.json."""
        scenario = generate(spec)
        return write_scenario(scenario, directory, pipeline_overrides)

    def cmd_fit(self, config: PipelineConfig) -> FitSummary:
        """Fit trend climatologies and one BGL model per season.

        Returns:
            FitSummary; `problems` lists failed post-fit invariant checks
        """
        layout = self.layout(config)
        save_resolved(config, layout.root)
        coarse, obs = self.read_inputs(config)
        train_end = config.train_end_month
        obs_train = obs.select([i for i, e in enumerate(obs.time.entries) if e <= train_end])
        if len(obs_train.time) == 0:
            raise MalformedInput(f"No observations on or before train_end {config.train_end}")

        obs_clim = climatology(obs_train, config.climatology_group)
        model_clim = climatology(self.overlap(coarse, obs_train), config.climatology_group, required=obs_clim.keys)
        layout.model_clim.parent.mkdir(parents=True, exist_ok=True)
        write_climatology(model_clim, layout.model_clim)
        write_climatology(obs_clim, layout.obs_clim)
        summary = FitSummary(artifacts=[str(layout.model_clim), str(layout.obs_clim)])
        logger.info(f"Stage 1 climatologies written ({config.climatology_group} grouping)")
        if not config.stage2:
            logger.info("Stage 2 disabled; only trend artifacts produced")
            return summary

        stage = self.stage_one(config, coarse, obs_clim, model_clim)
        seasons = [s for s in obs_train.time.seasons() if obs_train.time.season_positions(s).size]
        opts = self.solver_options(config)
        rule = self.split_rule(config)

        def fit_season(season: str) -> BglModel:
            try:
                residuals = build_residuals(stage.w, obs_train, stage.trend, season, train_end)
                basis = split_basis(compute_eofs(residuals, config.eof_source, config.seed), rule)
                lam, rho = bgl_service.select_penalties(
                    residuals, basis, config.penalties, folds=config.cv_folds, opts=opts
                )
                return bgl_service.fit(residuals, basis, lam, rho, opts, season_map=config.season_map)
            except DownscalingError as err:
                raise _in_context(err, f"season {season}") from err

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            models = list(pool.map(fit_season, seasons))

        layout.model(seasons[0]).parent.mkdir(parents=True, exist_ok=True)
        for season, model in zip(seasons, models):
            write_basis(model.basis, obs.spec, layout.basis(season))
            bgl_service.write_model(model, layout.model(season), layout.basis(season).name)
            reloaded = bgl_service.read_model(layout.model(season))
            summary.problems += bgl_service.validate(reloaded)
            summary.seasons.append(season)
            summary.penalties[season] = (model.lam, model.rho)
            summary.artifacts += [str(layout.basis(season)), str(layout.model(season))]
            logger.info(
                f"Season {season}: L={model.nlevels}, lambda={model.lam:g}, rho={model.rho:g}, "
                f"{len(model.trace) - 1} DC iterations"
            )
        for problem in summary.problems:
            logger.error(f"Invariant check failed: {problem}")
        return summary

    def load_stage_one(self, config: PipelineConfig) -> StageOne:
        layout = self.layout(config)
        for path in (layout.model_clim, layout.obs_clim):
            if not path.exists():
                raise ModelMissing(f"Missing trend artifact {path}; run fit first")
        coarse, _ = self.read_inputs(config)
        return self.stage_one(config, coarse, read_climatology(layout.obs_clim), read_climatology(layout.model_clim))

    def load_models(self, config: PipelineConfig, seasons: Sequence[str]) -> Dict[str, BglModel]:
        layout = self.layout(config)
        return {season: bgl_service.read_model(layout.model(season)) for season in seasons}

    def default_months(self, config: PipelineConfig, time: TimeIndex) -> List[Month]:
        start, end = config.holdout_window()
        start = start or next_month(config.train_end_month)
        return [e for e in time.entries if e >= start and (end is None or e <= end)]

    def predict_fields(self, config: PipelineConfig, stage: StageOne,
                       months: Sequence[Month]) -> Optional[DownscaledField]:
        for month in months:
            if stage.coarse.time.index_of(month) < 0:
                raise MonthOutOfRange(f"{format_month(month)} is outside the model field time range")
        if not config.stage2:
            return None
        seasons = sorted({stage.trend.time.season_of(m[1]) for m in months})
        models = self.load_models(config, seasons)
        return downscale(stage.trend, stage.w, models, months, config.omega1_mode,
                         config.nugget_in_sd, config.threads)

    def standard_prediction(self, config: PipelineConfig, stage: StageOne,
                            months: Sequence[Month]) -> DownscaledField:
        """Stage-1 trend with the usual constant-in-time standard error.

        The sd of every pixel is the root mean squared training residual
        obs - trend over months on or before train_end.
        """
        obs = _with_seasons(read_field(config.obs_path), config.season_map)
        training = [e for e in obs.time.entries if e <= config.train_end_month and stage.trend.time.index_of(e) >= 0]
        if not training:
            raise MalformedInput(f"No observations on or before train_end {config.train_end}")
        residual = (obs.values[[obs.time.index_of(e) for e in training]]
                    - stage.trend.values[[stage.trend.time.index_of(e) for e in training]])
        sd = np.sqrt(np.mean(residual ** 2, axis=0))
        mean = stage.trend.select([stage.trend.time.index_of(m) for m in months])
        seasons = {format_month(m): {"season": mean.time.season_of(m[1])} for m in months}
        return DownscaledField(
            mean, FineField(mean.spec, mean.time, np.tile(sd, (len(months), 1))),
            provenance={"months": seasons},
        )

    def cmd_predict(self, config: PipelineConfig, months: Optional[Sequence[Month]] = None) -> List[Path]:
        """Write mean and sd `.gsf` files per requested month.

        Raises:
            ModelMissing: fit artifacts absent
            MonthOutOfRange: a month outside the coarse field
        """
        stage = self.load_stage_one(config)
        months = list(months) if months else self.default_months(config, stage.coarse.time)
        if not months:
            raise MonthOutOfRange("No months to predict after train_end")
        result = self.predict_fields(config, stage, months)
        target = self.layout(config).predictions
        provenance = {"train_end": config.train_end, "coarse_sha256": file_digest(config.coarse_path)}
        if result is None:
            logger.warning("Stage 2 disabled: writing Stage-1 trend means with a constant standard error")
            result = self.standard_prediction(config, stage, months)
            provenance["method"] = "Standard"
        written = write_downscaled(result, target, provenance)
        logger.info(f"Predicted {len(months)} months into {target}")
        return written

    def cmd_validate(self, config: PipelineConfig) -> ValidationReport:
        """Compare GCM-interpolated, Standard (Stage 1 only) and BGL against held-out truth."""
        if not config.truth_path:
            raise ConfigError("validate needs truth_path")
        truth = _with_seasons(read_field(config.truth_path), config.season_map)
        stage = self.load_stage_one(config)
        months = [m for m in truth.time.entries if m in set(self.default_months(config, truth.time))]
        if not months:
            raise MonthOutOfRange("Truth field has no months inside the hold-out window")
        truth = truth.select([truth.time.index_of(m) for m in months])

        def rows(fld: FineField) -> FineField:
            return fld.select([fld.time.index_of(m) for m in months])

        predictions = {"GCM": rows(stage.w), "Standard": rows(stage.trend)}
        result = self.predict_fields(config, stage, months)
        if result is not None:
            predictions["BGL"] = result.mean
        report = build_report(
            truth, predictions, bounds=config.ssim_bounds, window=config.ssim_window,
            pooled_range=config.ssim_pooled_range, ssim_enabled=self.ssim_enabled(config, truth),
            ratio_pairs=RATIO_PAIRS,
        )
        write_report(report, self.layout(config).validation)
        return report

    @staticmethod
    def ssim_enabled(config: PipelineConfig, truth: FineField) -> bool:
        if config.ssim_bounds is not None:
            return True
        full = bool(truth.spec.mask.all())
        if not full:
            logger.warning("No ssim_bounds configured and the grid is masked; SSIM column left empty")
        return full


pipeline_service = PipelineService()
