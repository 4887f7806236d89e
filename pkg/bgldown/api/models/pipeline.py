#!/usr/bin/env python3
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict


# Pydantic models for request/response
class SimulateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: str
    seed: Optional[int] = None


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: str
    threads: Optional[int] = None


class FitRequest(RunRequest):
    seed: Optional[int] = None  # seeds the EOF basis completion


class PredictRequest(RunRequest):
    months: Optional[List[str]] = None  # YYYY-MM; default is the hold-out window


class SimulateResponse(BaseModel):
    output_dir: str
    files: Dict[str, str]


class FitResponse(BaseModel):
    seasons: List[str]
    penalties: Dict[str, Tuple[float, float]]
    problems: List[str] = []
    artifacts: List[str]


class PredictResponse(BaseModel):
    files: List[str]


class ReportRow(BaseModel):
    method: str
    season: str
    n_months: int
    mse: float
    ssim: Optional[float] = None
    pct_reduction_vs_Standard: Optional[float] = None
    pct_reduction_vs_GCM: Optional[float] = None


class ValidateResponse(BaseModel):
    rows: List[ReportRow]
    ratio_maps: List[str] = []


class ErrorResponse(BaseModel):
    detail: str  # "<ErrorType>: <message>"
