"""
Distributed dual averaging over a noisy peer-average transport, plus the
consensus and convergence bound calculators.

Each device keeps a dual variable z_k and a primal iterate x_k:

    z_k(n+1) = (1 - beta) z_k(n) + beta r_k(n) + g_k(n)
    x_k(n+1) = argmin_{x in X} <z_k(n+1), x> + ||x||^2 / (2 a(n+1))

where r_k is whatever the aggregator delivered for the peer average.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.core.errors import AggregationError, AirCompError, ConfigurationError, DataError, DimensionError, DisconnectedGraphError
from app.models.schemas import RunConfig, Scheme
from app.services.aggregators import BaseAggregator, complete_graph_matrix
from app.services.channel import substream
from app.services.tasks import BaseTask, Domain


logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-10
GRADIENT_STREAM = 1_000_001
AGGREGATION_STREAM = 1_000_002
TRACE_COLUMNS = ["round", "device", "gap", "dual_dev", "mse", "xi", "latency_s", "bound_zf", "bound_mmse"]


# ==================== Mixing ====================

@dataclass(frozen=True)
class MixingSpec:
    """Doubly stochastic P, mixing weight beta, W = (1 - beta) I + beta P and lambda2(P)."""
    P: np.ndarray
    beta: float
    W: np.ndarray
    lambda2: float

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.lambda2


def second_eigenvalue(P: np.ndarray) -> float:
    """max(lambda_2(P), -lambda_K(P)), the second-largest eigenvalue magnitude."""
    if np.allclose(P, P.T, atol=STOCHASTIC_TOL):
        eig = np.linalg.eigvalsh(P)
        value = max(eig[-2], -eig[0])
    else:
        value = np.sort(np.abs(np.linalg.eigvals(P)))[-2]
    return float(np.clip(value, 0.0, 1.0))


def build_mixing(P: np.ndarray, beta: float) -> MixingSpec:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ConfigurationError(f"mixing matrix must be square, got {P.shape}", key="P")
    if np.any(P < -STOCHASTIC_TOL):
        raise ConfigurationError("mixing matrix has negative entries", key="P")
    if not (np.allclose(P.sum(axis=0), 1.0, atol=STOCHASTIC_TOL) and np.allclose(P.sum(axis=1), 1.0, atol=STOCHASTIC_TOL)):
        raise ConfigurationError("mixing matrix is not doubly stochastic", key="P")
    if not 0.0 < beta < 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1), got {beta}", key="beta")

    lambda2 = second_eigenvalue(P)
    if lambda2 >= 1.0 - STOCHASTIC_TOL:
        logger.warning("mixing graph is disconnected (lambda2 = %.6f)", lambda2)
    W = (1.0 - beta) * np.eye(P.shape[0]) + beta * P
    return MixingSpec(P=P, beta=beta, W=W, lambda2=lambda2)


def complete_graph_mixing(K: int, beta: float) -> MixingSpec:
    """Uniform peer averaging, the mixing realised by the AirComp transports."""
    return build_mixing(complete_graph_matrix(K), beta)


def ring_mixing(K: int, beta: float, self_weight: float = 0.5) -> MixingSpec:
    if K < 3:
        raise ConfigurationError("a ring needs at least three devices", key="K")
    P = self_weight * np.eye(K)
    for k in range(K):
        P[k, (k + 1) % K] += (1.0 - self_weight) / 2.0
        P[k, (k - 1) % K] += (1.0 - self_weight) / 2.0
    return build_mixing(P, beta)


def metropolis_mixing(adjacency: np.ndarray, beta: float) -> MixingSpec:
    """Metropolis-Hastings weights of an undirected graph."""
    A = np.asarray(adjacency, dtype=bool)
    np.fill_diagonal(A, False)
    degree = A.sum(axis=1)
    P = np.where(A, 1.0 / (1.0 + np.maximum.outer(degree, degree)), 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return build_mixing(P, beta)


def mixing_for(cfg: RunConfig, K: int) -> MixingSpec:
    """The MixingSpec named by cfg.topology."""
    if cfg.topology == "ring":
        return ring_mixing(K, cfg.beta, cfg.ring_self_weight)
    return complete_graph_mixing(K, cfg.beta)


# ==================== Updates ====================

@dataclass
class DeviceState:
    """Dual and primal variables of one device."""
    z: np.ndarray
    x: np.ndarray


def project(z: np.ndarray, alpha_step: float, domain: Domain) -> np.ndarray:
    """argmin_{x in X} <z, x> + ||x||^2 / (2 alpha_step); rows are handled independently."""
    if not alpha_step > 0:
        raise DataError(f"step size must be positive, got {alpha_step}")
    if not isinstance(domain, Domain):
        raise ConfigurationError(f"unsupported domain type {type(domain).__name__}", key="domain")
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return domain.project(-alpha_step * z)
    return np.stack([domain.project(-alpha_step * row) for row in z])


def dual_update(z: np.ndarray, r: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    z, r, g = (np.asarray(a, dtype=float) for a in (z, r, g))
    if not (z.shape == r.shape == g.shape):
        raise DimensionError(f"shapes differ: z {z.shape}, r {r.shape}, g {g.shape}")
    return (1.0 - beta) * z + beta * r + g


def dual_update_matrix(z: np.ndarray, W: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Matrix form sum_l W[k, l] z_l + g_k."""
    z, g = np.asarray(z, dtype=float), np.asarray(g, dtype=float)
    if W.shape != (z.shape[0], z.shape[0]) or g.shape != z.shape:
        raise DimensionError(f"W {W.shape}, z {z.shape}, g {g.shape} are inconsistent")
    return W @ z + g


# ==================== Step size and bounds ====================

def _check_connected(lambda2: float) -> None:
    if lambda2 >= 1.0:
        raise DisconnectedGraphError(f"lambda2 = {lambda2} leaves no spectral gap")


def step_size(n: int, R: float, lambda2: float, xi: float, scale: Optional[float] = None) -> float:
    """R sqrt(1 - lambda2) / (4 xi sqrt(n)); `scale` replaces the numerator constant."""
    if n < 1:
        raise DataError("rounds are counted from 1")
    _check_connected(lambda2)
    if not xi > 0:
        raise DataError("xi must be positive")
    constant = scale if scale is not None else R * np.sqrt(1.0 - lambda2) / (4.0 * xi)
    return float(constant / np.sqrt(n))


def xi(Omega: float, beta: float, max_mse: float, K: int) -> float:
    """Second-moment bound of the channel-distorted subgradient."""
    return float(np.sqrt(Omega ** 2 + beta ** 2 * max_mse / K))


def dual_deviation_bound(xi_value: float, beta: float, lambda2: float, N: int, K: int) -> float:
    _check_connected(lambda2)
    if N < 2:
        raise DataError(f"the deviation bound needs N >= 2 rounds, got {N}")
    return float(2.0 * xi_value * np.log(N * np.sqrt(K)) / (beta * (1.0 - lambda2)) + 3.0 * xi_value)


def suboptimality_bound(
    scheme: Scheme | str,
    R: float,
    lambda2: float,
    N: int,
    K: int,
    Omega: float,
    beta: float,
    mse_series: np.ndarray,
    x_star_norm: float = 0.0,
) -> float:
    """
    Expected gap bound after N rounds. The MMSE variant adds the bias floor
    ||x*|| mean_n sqrt(MSE(n)/K), which does not decay with N.
    """
    _check_connected(lambda2)
    scheme = Scheme(scheme)
    mse_series = np.asarray(mse_series, dtype=float)
    max_mse = float(mse_series.max()) if mse_series.size else 0.0
    base = (
        20.0 * R * np.log(N * np.sqrt(K)) / (beta * np.sqrt(N) * np.sqrt(1.0 - lambda2))
        * np.sqrt(Omega ** 2 + beta ** 2 * max_mse / K)
    )
    if scheme == Scheme.MMSE:
        base += x_star_norm / N * float(np.sum(np.sqrt(mse_series / K)))
    return float(base)


# ==================== Trace ====================

@dataclass
class RoundRecord:
    round: int
    gaps: np.ndarray
    dual_dev: float
    mse: float
    xi: float
    latency_s: float
    bound_zf: float
    bound_mmse: float


@dataclass
class OptTrace:
    """Per-round history of one optimisation run."""
    aggregator: str
    records: list[RoundRecord] = field(default_factory=list)
    running_average: Optional[np.ndarray] = None

    def append(self, record: RoundRecord) -> None:
        if self.records and record.round <= self.records[-1].round:
            raise DataError("round indices must be strictly increasing")
        self.records.append(record)

    def to_rows(self) -> list[dict]:
        rows = []
        for rec in self.records:
            for device, gap in enumerate(rec.gaps):
                rows.append({
                    "round": rec.round,
                    "device": device,
                    "gap": float(gap),
                    "dual_dev": rec.dual_dev,
                    "mse": rec.mse,
                    "xi": rec.xi,
                    "latency_s": rec.latency_s,
                    "bound_zf": rec.bound_zf,
                    "bound_mmse": rec.bound_mmse,
                })
        return rows

    def final_gaps(self) -> np.ndarray:
        return self.records[-1].gaps

    def gap_curve(self) -> np.ndarray:
        return np.array([rec.gaps.mean() for rec in self.records])

    def dual_deviations(self) -> np.ndarray:
        return np.array([rec.dual_dev for rec in self.records])

    def mse_series(self) -> np.ndarray:
        return np.array([rec.mse for rec in self.records])

    def latencies(self) -> np.ndarray:
        return np.array([rec.latency_s for rec in self.records])


# ==================== Optimisation loop ====================

def run(
    task: BaseTask,
    mixing: MixingSpec,
    aggregator: BaseAggregator,
    cfg: RunConfig,
    seed: int = 0,
    trial: int = 0,
) -> OptTrace:
    """
    Run cfg.rounds rounds and report gaps at the running-average iterates.

    The aggregator must realise mixing.P: an IDEAL aggregator without its own
    P adopts it, every other transport raises ConfigurationError unless P is
    uniform peer averaging.
    """
    K, D = task.K, task.D
    if mixing.K != K:
        raise DimensionError(f"mixing matrix is for K={mixing.K}, task has K={K}")
    aggregator = aggregator.for_mixing(mixing.P)
    beta = cfg.beta
    xi_value = cfg.xi_override or xi(task.Omega, beta, 0.0, K)
    _check_connected(mixing.lambda2)
    x_star_norm = float(np.linalg.norm(task.x_star))

    z = np.zeros((K, D))
    x = project(z, 1.0, task.domain)
    running = np.zeros((K, D))
    latency = 0.0
    mse_history: list[float] = []
    trace = OptTrace(aggregator=aggregator.kind.value)

    for n in range(1, cfg.rounds + 1):
        g = task.subgradients(x, substream(seed, trial, n, GRADIENT_STREAM))
        try:
            outcome = aggregator.aggregate(z, n, substream(seed, trial, n, AGGREGATION_STREAM))
        except AirCompError as exc:
            raise AggregationError(str(exc), n) from exc

        z = dual_update(z, outcome.r, g, beta)
        running += x
        x = project(z, step_size(n + 1, task.R, mixing.lambda2, xi_value, cfg.step_scale), task.domain)

        latency += outcome.latency_s
        mse_history.append(outcome.mse)
        x_hat = running / n
        bound_args = dict(
            R=task.R, lambda2=mixing.lambda2, N=n, K=K, Omega=task.Omega, beta=beta,
            mse_series=np.array(mse_history), x_star_norm=x_star_norm,
        )
        trace.append(RoundRecord(
            round=n,
            gaps=np.array([task.gap(x_hat[k]) for k in range(K)]),
            dual_dev=float(np.linalg.norm(z - z.mean(axis=0), axis=1).max()),
            mse=outcome.mse,
            xi=xi_value,
            latency_s=latency,
            bound_zf=suboptimality_bound(Scheme.ZF, **bound_args),
            bound_mmse=suboptimality_bound(Scheme.MMSE, **bound_args),
        ))
        if n % max(cfg.rounds // 10, 1) == 0:
            logger.debug("round %d: mean gap %.4e, dual dev %.4e", n, trace.records[-1].gaps.mean(), trace.records[-1].dual_dev)

    trace.running_average = running / cfg.rounds
    return trace
