"""
AirComp Lab API - Main Application Entry Point

A FastAPI service that runs distributed AirComp beamforming and
decentralized optimisation experiments on request.
"""
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.api.routes import router
from app.core.config import get_settings
from app.core.errors import AirCompError
from app.core.logging import banner, setup_logging


settings = get_settings()
logger = logging.getLogger("app")


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan handler for startup/shutdown events."""
    setup_logging(settings.log_level)
    settings.setup_directories()
    banner(logger, f"Starting {settings.app_name} v{settings.app_version}", {
        "Default seed": settings.default_seed,
        "Trial limit": settings.api_max_trials,
        "Results dir": settings.output_dir,
    })

    yield

    banner(logger, f"Shutting down {settings.app_name}", {})


# Create FastAPI app
app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    description="""
## AirComp Lab API

Experiments on distributed over-the-air computation for decentralized optimisation.

### Experiments:
- **mse_sweep**: sum AirComp error of ZF, MMSE and single-aggregation designs against SNR, Nt or K
- **latency_sweep**: per-round latency of distributed AirComp, single aggregation and digital TDMA
- **train**: distributed dual averaging over each transport
- **beamform**: per-device design summary for one channel draw
- **validate**: oracle and consistency checks
    """,
    lifespan=lifespan,
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_url="/openapi.json"
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include API routes
app.include_router(router, prefix="/api/v1", tags=["AirComp Lab API"])


# Root endpoint
@app.get("/", tags=["Root"])
async def root():
    """Root endpoint with API information."""
    return {
        "name": settings.app_name,
        "version": settings.app_version,
        "docs": "/docs",
        "health": "/api/v1/health"
    }


@app.exception_handler(AirCompError)
async def aircomp_exception_handler(request: Request, exc: AirCompError):
    """Configuration and numerical errors are the caller's to fix."""
    return JSONResponse(
        status_code=422,
        content={
            "detail": str(exc),
            "error_type": type(exc).__name__
        }
    )


# Global exception handler
@app.exception_handler(Exception)
async def global_exception_handler(request: Request, exc: Exception):
    """Handle unexpected exceptions."""
    logger.exception("unhandled error on %s", request.url.path)
    return JSONResponse(
        status_code=500,
        content={
            "detail": str(exc),
            "error_type": type(exc).__name__
        }
    )


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.main:app",
        host="0.0.0.0",
        port=8000,
        reload=settings.debug
    )
