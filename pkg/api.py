#!/usr/bin/env python3
"""
FastAPI REST API for the MEDA experiment runner.

Training and report jobs run in a worker thread so the event loop stays
responsive; one request trains one config.
"""

import asyncio
import logging
import math
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Dict, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from config import API_HOST, API_PORT, build_experiment_config, get_config, validate_config
from errors import ConfigError, DataError, MedaError
from main import ExperimentRunner, aggregate_by_variant, build_report, diff_checkpoints

logger = logging.getLogger(__name__)

_state: Dict[str, Any] = {"ready": False, "runs": 0}


class TrainRequest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict, description="experiment document (data/model/optim/run sections)")
    overrides: Dict[str, Any] = Field(default_factory=dict, description="dotted-path overrides, e.g. {'run.k': 4}")


class ReportRequest(BaseModel):
    csv_paths: List[str] = Field(..., min_length=1)


class DiffRequest(BaseModel):
    ckpt_a: str
    ckpt_b: str
    source: str = Field(default="mlp", description="mlp or bank:<r>")


class RunSummary(BaseModel):
    run_id: str
    method: str
    variant: str
    k: int
    best_pass: Optional[int] = None
    best_auc: Optional[float] = None
    delta_vs_first: Optional[float] = None
    records: List[Dict[str, Any]]
    storage: Dict[str, Any]
    outputs: Dict[str, str]
    processing_time: float


def _json_safe(value: Any) -> Any:
    """NaN/inf are not valid JSON; undefined metrics go out as null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@asynccontextmanager
async def lifespan(app: FastAPI):
    _state["ready"] = validate_config()
    if not _state["ready"]:
        logger.error("Environment configuration invalid; training endpoints will refuse requests")
    yield
    logger.info("Shutting down MEDA API")


app = FastAPI(
    title="MEDA Experiment API",
    description="Multi-epoch CTR training with per-epoch embedding reinitialization",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["*"],
)


@app.get("/")
async def root():
    return {
        "name": "MEDA Experiment API",
        "version": "1.0.0",
        "docs": "/docs",
        "health": "/health",
        "endpoints": {
            "train": "POST /train - run one experiment config",
            "report": "POST /report - aggregate metrics CSVs",
            "diff-params": "POST /diff-params - compare two checkpoints",
            "config": "GET /config - environment defaults",
        },
    }


@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "runner_ready": _state["ready"],
        "runs_completed": _state["runs"],
    }


@app.get("/config")
async def get_configuration():
    return get_config()


@app.post("/train", response_model=RunSummary)
async def train(request: TrainRequest) -> RunSummary:
    if not _state["ready"]:
        raise HTTPException(status_code=503, detail="Runner not ready: invalid environment configuration")
    cfg = build_experiment_config(request.config, request.overrides)
    runner = ExperimentRunner(cfg)
    loop = asyncio.get_running_loop()
    summary = await loop.run_in_executor(None, runner.run)
    runner.export_results(summary)
    _state["runs"] += 1
    return RunSummary(**_json_safe(summary))


@app.post("/report")
async def report(request: ReportRequest):
    loop = asyncio.get_running_loop()
    table = await loop.run_in_executor(None, build_report, request.csv_paths)
    variants = aggregate_by_variant(table)
    return {
        "rows": _json_safe(table.to_dict(orient="records")),
        "variants": _json_safe(variants.to_dict(orient="records")),
    }


@app.post("/diff-params")
async def diff_params(request: DiffRequest):
    loop = asyncio.get_running_loop()
    result = await loop.run_in_executor(None, diff_checkpoints, request.ckpt_a, request.ckpt_b, request.source)
    return _json_safe(result)


def _error_body(request, message: str, kind: str) -> Dict[str, Any]:
    return {
        "error": message,
        "type": kind,
        "timestamp": datetime.now().isoformat(),
        "path": str(request.url.path),
    }


@app.exception_handler(MedaError)
async def meda_exception_handler(request, exc: MedaError):
    if isinstance(exc, ConfigError):
        status = 422
    elif isinstance(exc, DataError):
        status = 400
    else:
        status = 500
    return JSONResponse(status_code=status, content=_error_body(request, str(exc), type(exc).__name__))


@app.exception_handler(HTTPException)
async def http_exception_handler(request, exc: HTTPException):
    return JSONResponse(status_code=exc.status_code, content=_error_body(request, exc.detail, "HTTPException"))


@app.exception_handler(Exception)
async def general_exception_handler(request, exc: Exception):
    logger.exception("Unhandled error on %s", request.url.path)
    return JSONResponse(status_code=500, content=_error_body(request, "Internal server error", type(exc).__name__))


if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(level=logging.INFO)
    logger.info("Starting MEDA API at http://%s:%s", API_HOST, API_PORT)
    uvicorn.run("api:app", host=API_HOST, port=API_PORT, log_level="info", workers=1)
