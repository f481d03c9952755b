"""
Peer-average transports for the distributed optimiser.

Every aggregator maps the round's states z (K, D) to received estimates r_k
of the peer average (1/(K-1)) sum_{l != k} z_l, and reports the round's
error and air time. Channels are redrawn every round from the system seed.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import ConfigurationError
from app.models.schemas import AggregatorKind, BisectionConfig, LatencyScheme, Scheme, SystemConfig
from app.services.aircomp_signal import (
    BeamformingSolution,
    analytic_mse,
    compute_stats,
    normalize,
    peer_average,
    simulate_round,
)
from app.services.benchmarks import (
    DEFAULT_BITS,
    LatencyModel,
    digital_aggregate,
    round_latency,
    simulate_single_agg,
    single_agg_design,
    single_agg_mse,
)
from app.services.channel import ChannelSet, sample_rician
from app.services.mmse_beamforming import mmse_design
from app.services.zf_beamforming import zf_design


logger = logging.getLogger(__name__)


def complete_graph_matrix(K: int) -> np.ndarray:
    """(1 - I) / (K - 1): every device weighs its K - 1 peers equally."""
    return (np.ones((K, K)) - np.eye(K)) / (K - 1)


@dataclass(frozen=True)
class AggregationOutcome:
    """What one round of aggregation delivered."""
    r: np.ndarray
    mse: float
    latency_s: float
    solution: Optional[BeamformingSolution] = None


class BaseAggregator(ABC):
    """Abstract base class for aggregation transports."""

    kind: AggregatorKind
    latency_scheme: LatencyScheme = LatencyScheme.DISTRIBUTED_AIRCOMP

    def __init__(self, system: SystemConfig, trial: int = 0, sigma2: Optional[float] = None,
                 bits: int = DEFAULT_BITS):
        self.system = system
        self.trial = trial
        self.sigma2 = system.sigma2 if sigma2 is None else float(sigma2)
        self.bits = bits

    def channel(self, round_index: int) -> ChannelSet:
        return sample_rician(self.system, round_index, self.trial)

    def latency(self, D: int, ch: Optional[ChannelSet] = None) -> float:
        model = LatencyModel(
            scheme=self.latency_scheme,
            K=self.system.K,
            D=D,
            B=self.system.B,
            P0=self.system.P0,
            sigma2=self.sigma2,
            bits=self.bits,
        )
        return round_latency(model, ch)

    def mixing_matrix(self, K: int) -> np.ndarray:
        """The P this transport realises: uniform peer averaging."""
        return complete_graph_matrix(K)

    def for_mixing(self, P: np.ndarray) -> "BaseAggregator":
        """This transport if it realises P, otherwise ConfigurationError."""
        P = np.asarray(P, dtype=float)
        if not np.allclose(self.mixing_matrix(P.shape[0]), P, atol=1e-10):
            raise ConfigurationError(
                f"{self.kind.value} realises uniform peer averaging and cannot run a different mixing matrix",
                key="run.topology",
            )
        return self

    @abstractmethod
    def aggregate(self, z: np.ndarray, round_index: int, rng: np.random.Generator) -> AggregationOutcome:
        pass


class IdealAggregator(BaseAggregator):
    """Noiseless exact averaging, optionally with a general mixing matrix P (r = P z)."""

    kind = AggregatorKind.IDEAL

    def __init__(self, system: SystemConfig, P: Optional[np.ndarray] = None, **kwargs):
        super().__init__(system, **kwargs)
        self.P = None if P is None else np.asarray(P, dtype=float)

    def mixing_matrix(self, K):
        return complete_graph_matrix(K) if self.P is None else self.P

    def for_mixing(self, P):
        """Without an explicit P the ideal transport adopts the run's mixing."""
        P = np.asarray(P, dtype=float)
        if self.P is None and not np.allclose(complete_graph_matrix(P.shape[0]), P, atol=1e-10):
            return IdealAggregator(self.system, P=P, trial=self.trial, sigma2=self.sigma2, bits=self.bits)
        return super().for_mixing(P)

    def aggregate(self, z, round_index, rng):
        r = peer_average(z) if self.P is None else self.P @ z
        return AggregationOutcome(r=r, mse=0.0, latency_s=self.latency(z.shape[1]))


class AirCompAggregator(BaseAggregator):
    """Distributed AirComp with per-round ZF or MMSE multicast beamforming."""

    def __init__(self, system: SystemConfig, scheme: Scheme, bisection: Optional[BisectionConfig] = None,
                 **kwargs):
        super().__init__(system, **kwargs)
        if scheme not in (Scheme.ZF, Scheme.MMSE):
            raise ConfigurationError(f"AirComp aggregation supports ZF or MMSE, not {scheme}", key="scheme")
        self.scheme = scheme
        self.kind = AggregatorKind.AIRCOMP_ZF if scheme == Scheme.ZF else AggregatorKind.AIRCOMP_MMSE
        self.bisection = bisection or BisectionConfig(inner_tol=1e-6)

    def design(self, ch: ChannelSet) -> BeamformingSolution:
        if self.scheme == Scheme.ZF:
            return zf_design(ch, self.system.P0)
        return mmse_design(ch, self.system.P0, self.sigma2, self.bisection)

    def aggregate(self, z, round_index, rng):
        ch = self.channel(round_index)
        sol = self.design(ch)
        stats = compute_stats(z)
        r = simulate_round(ch, sol, normalize(z, stats), stats, self.sigma2, rng)
        return AggregationOutcome(
            r=r,
            mse=analytic_mse(ch, sol, self.sigma2, stats.V, z.shape[1]),
            latency_s=self.latency(z.shape[1]),
            solution=sol,
        )


class SingleAggAggregator(BaseAggregator):
    """K sequential single-receiver AirComp slots per round."""

    kind = AggregatorKind.SINGLE_AGG
    latency_scheme = LatencyScheme.SINGLE_AGG

    def aggregate(self, z, round_index, rng):
        ch = self.channel(round_index)
        design = single_agg_design(ch, self.system.P0)
        stats = compute_stats(z)
        r = simulate_single_agg(ch, design, normalize(z, stats), stats, self.sigma2, rng)
        return AggregationOutcome(
            r=r,
            mse=single_agg_mse(design, self.sigma2, stats.V, z.shape[1]),
            latency_s=self.latency(z.shape[1]),
        )


class DigitalAggregator(BaseAggregator):
    """Quantised states delivered error-free over ZF-precoded TDMA slots."""

    kind = AggregatorKind.DIGITAL
    latency_scheme = LatencyScheme.DIGITAL

    def aggregate(self, z, round_index, rng):
        r = digital_aggregate(z, self.bits)
        return AggregationOutcome(
            r=r,
            mse=float(np.sum((r - peer_average(z)) ** 2)),
            latency_s=self.latency(z.shape[1], self.channel(round_index)),
        )


def get_aggregator(
    kind: AggregatorKind | str,
    system: SystemConfig,
    trial: int = 0,
    sigma2: Optional[float] = None,
    bits: int = DEFAULT_BITS,
    bisection: Optional[BisectionConfig] = None,
    P: Optional[np.ndarray] = None,
) -> BaseAggregator:
    """Factory function to build an aggregator by kind."""
    kind = AggregatorKind(kind)
    common = {"trial": trial, "sigma2": sigma2, "bits": bits}
    if kind == AggregatorKind.IDEAL:
        return IdealAggregator(system, P=P, **common)
    if kind == AggregatorKind.AIRCOMP_ZF:
        return AirCompAggregator(system, Scheme.ZF, **common)
    if kind == AggregatorKind.AIRCOMP_MMSE:
        return AirCompAggregator(system, Scheme.MMSE, bisection=bisection, **common)
    if kind == AggregatorKind.SINGLE_AGG:
        return SingleAggAggregator(system, **common)
    return DigitalAggregator(system, **common)
