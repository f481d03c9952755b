"""
Pydantic schemas for configuration, experiment specs and API request/response models.
"""
import math
from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


# ==================== Enumerations ====================

class Scheme(str, Enum):
    """Beamforming design that produced a solution."""
    ZF = "ZF"
    MMSE = "MMSE"
    SINGLE_AGG = "SINGLE_AGG"


class AggregatorKind(str, Enum):
    """Transport used for the peer-average step of the optimiser."""
    IDEAL = "IDEAL"
    AIRCOMP_ZF = "AIRCOMP_ZF"
    AIRCOMP_MMSE = "AIRCOMP_MMSE"
    SINGLE_AGG = "SINGLE_AGG"
    DIGITAL = "DIGITAL"


class LatencyScheme(str, Enum):
    """Schemes covered by the per-round latency model."""
    DISTRIBUTED_AIRCOMP = "DISTRIBUTED_AIRCOMP"
    SINGLE_AGG = "SINGLE_AGG"
    DIGITAL = "DIGITAL"


class TaskKind(str, Enum):
    """Synthetic convex tasks standing in for model training."""
    QUADRATIC_CONSENSUS = "quadratic_consensus"
    RIDGE_REGRESSION = "ridge_regression"
    LOGISTIC_REGRESSION = "logistic_regression"
    L1_CONSENSUS = "l1_consensus"


# ==================== System Configuration ====================

class SystemConfig(BaseModel):
    """Radio and network parameters shared by every round."""
    model_config = ConfigDict(frozen=True)

    K: int = Field(default=5, ge=2, description="Number of devices")
    Nt: int = Field(default=4, ge=1, description="Transmit antennas per device")
    D: int = Field(default=100, ge=1, description="State dimension / symbols per round")
    P0: float = Field(default=1.0, gt=0, description="Maximum transmit power in watts")
    sigma2: float = Field(default=0.1, gt=0, description="Receiver noise variance (linear)")
    B: float = Field(default=1e6, gt=0, description="Bandwidth in Hz")
    rician_ratio: float = Field(default=0.6, ge=0, description="LoS-to-scatter power ratio")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Master RNG seed")
    reciprocal: bool = Field(default=False, description="Draw h_lk equal to h_kl")

    @model_validator(mode="after")
    def _check_dof(self) -> "SystemConfig":
        if self.Nt < self.K - 1:
            raise ValueError(f"Nt={self.Nt} must be at least K-1={self.K - 1}")
        return self

    @property
    def snr_db(self) -> float:
        """Transmit SNR P0/sigma2 in dB."""
        return 10.0 * math.log10(self.P0 / self.sigma2)

    @property
    def symbol_duration(self) -> float:
        return 1.0 / self.B

    def with_snr(self, snr_db: float) -> "SystemConfig":
        """Copy with sigma2 set so that P0/sigma2 equals the given SNR."""
        return self.model_copy(update={"sigma2": self.P0 / 10.0 ** (snr_db / 10.0)})


# ==================== Solver Configuration ====================

class BisectionConfig(BaseModel):
    """Tolerances for the MMSE bisection and its inner barrier solver."""
    model_config = ConfigDict(frozen=True)

    eps_alpha: float = Field(default=1e-6, gt=0, description="Bisection tolerance on alpha")
    inner_tol: float = Field(
        default=1e-8, gt=0, description="Relative duality-gap tolerance of the power-minimisation subproblem"
    )
    max_outer: int = Field(default=100, ge=1, description="Bisection iteration cap")
    max_inner: int = Field(default=400, ge=1, description="Newton iteration cap per barrier stage")
    max_doublings: int = Field(default=60, ge=1, description="Upper-bracket doubling cap")
    barrier_factor: float = Field(default=10.0, gt=1, description="Barrier parameter growth per stage")
    record_trace: bool = Field(default=False, description="Keep per-iteration solver rows")


class RunConfig(BaseModel):
    """Settings of one distributed dual-averaging run."""
    model_config = ConfigDict(frozen=True)

    rounds: int = Field(default=200, ge=1, description="Number of rounds N")
    beta: float = Field(default=0.5, gt=0, lt=1, description="Mixing weight beta")
    topology: Literal["complete", "ring"] = Field(
        default="complete", description="Mixing graph; only IDEAL aggregation can realise a ring"
    )
    ring_self_weight: float = Field(default=0.5, ge=0, lt=1, description="Diagonal of the ring mixing matrix")
    step_scale: Optional[float] = Field(
        default=None, gt=0, description="Override of R*sqrt(1-lambda2)/(4*xi) in the step size"
    )
    xi_override: Optional[float] = Field(default=None, gt=0, description="xi used for the step size")
    mmse_inner_tol: float = Field(default=1e-6, gt=0, description="Subproblem tolerance inside the optimisation loop")
    quantization_bits: int = Field(default=16, ge=1, description="Bits per coefficient (digital)")
    gradient_noise: float = Field(default=0.0, ge=0, description="Std of Gaussian noise added to subgradients")


# ==================== Experiment Specification ====================

ExperimentKind = Literal["mse_sweep", "latency_sweep", "train", "beamform", "validate"]


class ExperimentSpec(BaseModel):
    """Everything a CLI subcommand or API call needs to reproduce a run."""
    model_config = ConfigDict(frozen=True)

    kind: ExperimentKind = Field(..., description="Experiment to run")
    sweep_var: Optional[Literal["snr_db", "Nt", "K"]] = Field(
        default=None, description="Swept SystemConfig parameter"
    )
    grid: list[float] = Field(default_factory=lambda: [0.0], description="Values of the swept parameter")
    trials: int = Field(default=100, ge=1, description="Channel draws (or seeds) per grid point")
    schemes: list[str] = Field(
        default_factory=lambda: ["ZF", "MMSE", "SINGLE_AGG"], description="Schemes to evaluate"
    )
    system: SystemConfig = Field(default_factory=SystemConfig, description="Base system configuration")
    bisection: BisectionConfig = Field(default_factory=BisectionConfig, description="MMSE solver settings")
    run: RunConfig = Field(default_factory=RunConfig, description="Optimiser settings (train)")
    task: TaskKind = Field(default=TaskKind.QUADRATIC_CONSENSUS, description="Task for train")
    heterogeneous: bool = Field(default=False, description="Label-sorted shards for train")
    threads: int = Field(default=1, ge=1, description="Worker threads for trials")
    inject_eta_scale: float = Field(default=1.0, gt=0, description="Mutation switch used by validate")
    validation_scale: Literal["full", "quick"] = Field(
        default="full", description="validate instance counts: acceptance scale or a quick smoke run"
    )
    output: Optional[str] = Field(default=None, description="CSV/report output path")

    @model_validator(mode="after")
    def _check_grid(self) -> "ExperimentSpec":
        if not self.grid:
            raise ValueError("grid must be non-empty")
        return self


# ==================== API Schemas ====================

class ExperimentRequest(ExperimentSpec):
    """Body of an experiment request; the kind comes from the URL path."""
    kind: Optional[ExperimentKind] = Field(default=None, description="Ignored; taken from the path")


class ExperimentResponse(BaseModel):
    """Rows produced by an experiment run through the API."""
    kind: str = Field(..., description="Experiment kind")
    config_hash: str = Field(..., description="Hash of the system configuration and spec")
    rows: list[dict] = Field(default_factory=list, description="Result rows, CSV column order")
    passed: Optional[bool] = Field(default=None, description="Overall verdict for validate")


class HealthResponse(BaseModel):
    """Health check response model."""
    status: str = Field(default="healthy")
    version: str
    default_seed: int
    max_trials: int


class ErrorResponse(BaseModel):
    """Error response model."""
    detail: str = Field(..., description="Error message")
    error_type: str = Field(default="error", description="Type of error")
