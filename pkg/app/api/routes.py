"""
API routes for the AirComp experiment service.
"""
import logging

from fastapi import APIRouter, HTTPException
from pydantic import ValidationError

from app.core.config import get_settings
from app.models.schemas import (
    ErrorResponse,
    ExperimentRequest,
    ExperimentResponse,
    ExperimentSpec,
    HealthResponse,
)
from app.services.experiments import COMMANDS, config_hash


settings = get_settings()
router = APIRouter()
logger = logging.getLogger(__name__)


# ==================== Health Check ====================

@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Health Check",
    description="Check the health status of the API"
)
async def health_check():
    """Check API health and return the experiment defaults."""
    return HealthResponse(
        status="healthy",
        version=settings.app_version,
        default_seed=settings.default_seed,
        max_trials=settings.api_max_trials,
    )


# ==================== Experiment Endpoint ====================

@router.post(
    "/experiments/{kind}",
    response_model=ExperimentResponse,
    summary="Run Experiment",
    description="Run mse_sweep, latency_sweep, train, beamform or validate and return the CSV rows as JSON.",
    responses={
        400: {"model": ErrorResponse, "description": "Request exceeds the trial budget"},
        404: {"model": ErrorResponse, "description": "Unknown experiment kind"},
        422: {"model": ErrorResponse, "description": "Invalid configuration or numerical failure"},
    }
)
def run_experiment(kind: str, request: ExperimentRequest):
    """
    Run one experiment synchronously.

    The body has the same fields as a config file; the path selects the
    experiment. Seed and threads fall back to the server defaults. Trials
    above the server's budget are rejected.
    """
    kind = kind.replace("-", "_")
    if kind not in COMMANDS:
        raise HTTPException(status_code=404, detail=f"Unknown experiment kind '{kind}'. Available: {', '.join(COMMANDS)}")

    try:
        fields = request.model_dump(exclude_unset=True, exclude={"kind", "output"})
        fields.setdefault("system", {}).setdefault("seed", settings.default_seed)
        fields.setdefault("threads", settings.default_threads)
        spec = ExperimentSpec.model_validate({**fields, "kind": kind})
    except ValidationError as e:
        raise HTTPException(status_code=422, detail=str(e))

    if spec.trials > settings.api_max_trials:
        raise HTTPException(
            status_code=400,
            detail=f"trials={spec.trials} exceeds the API limit of {settings.api_max_trials}"
        )

    runner, _ = COMMANDS[kind]
    logger.info("running %s (%s)", kind, config_hash(spec))
    result = runner(spec)
    if kind == "validate":
        rows, report = result
        return ExperimentResponse(kind=kind, config_hash=config_hash(spec), rows=rows, passed=report.passed)
    return ExperimentResponse(kind=kind, config_hash=config_hash(spec), rows=result)
