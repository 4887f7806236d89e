#!/usr/bin/env python3
"""
API endpoints for the downscaling pipeline.
"""

import logging
import math

from fastapi import APIRouter, HTTPException

from bgldown.api.models.pipeline import (
    ErrorResponse,
    FitRequest,
    FitResponse,
    PredictRequest,
    PredictResponse,
    ReportRow,
    RunRequest,
    SimulateRequest,
    SimulateResponse,
    ValidateResponse,
)
from bgldown.config.pipeline import load_config, load_scenario
from bgldown.services.gridded_io import parse_month
from bgldown.services.pipeline_service import pipeline_service
from bgldown.utils.errors import DownscalingError, ModelMissing, MonthOutOfRange

router = APIRouter(prefix="/api/pipeline")
ERROR_RESPONSES = {404: {"model": ErrorResponse}, 400: {"model": ErrorResponse}, 500: {"model": ErrorResponse}}

logger = logging.getLogger(__name__)


def _http_error(err: Exception) -> HTTPException:
    if isinstance(err, (ModelMissing, MonthOutOfRange)):
        return HTTPException(status_code=404, detail=f"{type(err).__name__}: {err}")
    if isinstance(err, DownscalingError):
        return HTTPException(status_code=400, detail=f"{type(err).__name__}: {err}")
    logger.exception("Unexpected pipeline failure")
    return HTTPException(status_code=500, detail=f"Internal error: {str(err)}")


def _finite_or_none(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


# Sync handlers run in the FastAPI threadpool
@router.post("/simulate", response_model=SimulateResponse, responses=ERROR_RESPONSES)
def simulate(request: SimulateRequest):
    """Generate a synthetic scenario from a scenario config."""
    try:
        spec, output_dir, overrides = load_scenario(request.config, request.seed)
        files = pipeline_service.cmd_simulate(spec, output_dir, overrides)
        return SimulateResponse(output_dir=str(output_dir), files={k: str(v) for k, v in files.items()})
    except Exception as e:
        raise _http_error(e)


@router.post("/fit", response_model=FitResponse, responses=ERROR_RESPONSES)
def fit(request: FitRequest):
    """Fit Stage-1 climatologies and per-season BGL models."""
    try:
        config = load_config(request.config, seed=request.seed, threads=request.threads)
        summary = pipeline_service.cmd_fit(config)
        return FitResponse(
            seasons=summary.seasons,
            penalties=summary.penalties,
            problems=summary.problems,
            artifacts=summary.artifacts,
        )
    except Exception as e:
        raise _http_error(e)


@router.post("/predict", response_model=PredictResponse, responses=ERROR_RESPONSES)
def predict(request: PredictRequest):
    """Downscale the requested months (default: the hold-out window)."""
    try:
        config = load_config(request.config, threads=request.threads)
        months = [parse_month(m) for m in request.months] if request.months else None
        written = pipeline_service.cmd_predict(config, months)
        return PredictResponse(files=[str(p) for p in written])
    except Exception as e:
        raise _http_error(e)


@router.post("/validate", response_model=ValidateResponse, responses=ERROR_RESPONSES)
def validate(request: RunRequest):
    """Score GCM, Standard and BGL predictions against held-out truth."""
    try:
        config = load_config(request.config, threads=request.threads)
        report = pipeline_service.cmd_validate(config)
        rows = [ReportRow(**{k: _finite_or_none(v) for k, v in row.items()}) for row in report.rows]
        return ValidateResponse(rows=rows, ratio_maps=sorted(report.ratios))
    except Exception as e:
        raise _http_error(e)
