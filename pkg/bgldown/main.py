#!/usr/bin/env python3
"""
Command-line entry: simulate | fit | predict | validate | serve.

Exit codes: 0 success, 1 any DownscalingError, 2 post-fit invariant failure.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

import uvicorn
from fastapi import FastAPI

from bgldown.api.routes.pipeline import router as pipeline_router
from bgldown.config.pipeline import load_config, load_scenario
from bgldown.config.settings import API_HOST, API_PORT, LOG_FORMAT, LOG_LEVEL
from bgldown.services.gridded_io import parse_month
from bgldown.services.pipeline_service import pipeline_service
from bgldown.utils.errors import DownscalingError

logger = logging.getLogger("bgldown")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2

# Initialize FastAPI app
app = FastAPI(title="bgldown Downscaling API")
app.include_router(pipeline_router)


def start_server(host: str = API_HOST, port: int = API_PORT):
    """Start the FastAPI server"""
    uvicorn.run(app, host=host, port=port)


def _months(text: Optional[str]):
    if not text:
        return None
    return [parse_month(m.strip()) for m in text.split(",") if m.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgldown", description="Two-stage statistical downscaling")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="Logging level (default from BGLDOWN_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("simulate", "Generate a synthetic scenario"),
        ("fit", "Fit Stage-1 climatologies and per-season BGL models"),
        ("predict", "Downscale future months"),
        ("validate", "Score predictions against held-out truth"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="JSON config file")
        if name in ("simulate", "fit"):
            cmd.add_argument("--seed", type=int, default=None, help="Override the config seed")
        if name != "simulate":
            cmd.add_argument("--threads", type=int, default=None, help="Worker threads")
        if name == "predict":
            cmd.add_argument("--months", default=None, help="Comma-separated YYYY-MM list")

    serve = sub.add_parser("serve", help="Start the HTTP API")
    serve.add_argument("--host", default=API_HOST)
    serve.add_argument("--port", type=int, default=API_PORT)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "serve":
        start_server(args.host, args.port)
        return EXIT_OK
    if args.command == "simulate":
        spec, output_dir, overrides = load_scenario(args.config, args.seed)
        files = pipeline_service.cmd_simulate(spec, output_dir, overrides)
        print(json.dumps({k: str(v) for k, v in files.items()}, indent=2))
        return EXIT_OK

    config = load_config(args.config, seed=getattr(args, "seed", None), threads=args.threads)
    if args.command == "fit":
        summary = pipeline_service.cmd_fit(config)
        print(json.dumps({"seasons": summary.seasons, "penalties": summary.penalties,
                          "problems": summary.problems}, indent=2))
        return EXIT_OK if summary.invariants_ok else EXIT_INVARIANT
    if args.command == "predict":
        written = pipeline_service.cmd_predict(config, _months(args.months))
        print(json.dumps([str(p) for p in written], indent=2))
        return EXIT_OK
    report = pipeline_service.cmd_validate(config)
    print(report.to_frame().to_string(index=False))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT, stream=sys.stderr)
    try:
        return run(args)
    except DownscalingError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
