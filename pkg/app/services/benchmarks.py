"""
Benchmark transports and the per-round latency model.

- Single-aggregation AirComp: one receiver per TDMA slot, every other device
  inverts its channel towards it, K slots per round.
- Digital TDMA: Q-bit quantised states sent reliably at the Shannon rate of
  the ZF-precoded link, so peers recover exact averages of the quantised values.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.core.errors import ConfigurationError, DataError, DimensionError
from app.models.schemas import LatencyScheme, Scheme, SystemConfig
from app.services.aircomp_signal import BeamformingSolution, NormalizationStats, peer_average
from app.services.channel import ChannelSet, complex_gaussian, device_matrix
from app.services.zf_beamforming import gram_solve


logger = logging.getLogger(__name__)

DEFAULT_BITS = 16


# ==================== Single-aggregation AirComp ====================

@dataclass(frozen=True)
class SingleAggregationDesign:
    """Beamformers for every slot: p[l, k] is transmitter k's vector in receiver l's slot."""
    p: np.ndarray = field(repr=False)  # (K, K, Nt), zero where k == l
    eta: np.ndarray  # (K,) per-slot alignment factor

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    def slot(self, receiver: int) -> BeamformingSolution:
        return BeamformingSolution(scheme=Scheme.SINGLE_AGG, p=self.p[receiver], eta=float(self.eta[receiver]))


def single_agg_slot(ch: ChannelSet, P0: float, receiver: int) -> tuple[np.ndarray, float]:
    """
    Matched-direction beamformers towards one receiver with effective channel
    inversion: every aligned gain equals sqrt(eta_slot).
    """
    if not 0 <= receiver < ch.K:
        raise DimensionError(f"receiver {receiver} out of range for K={ch.K}")
    peers = ch.peers(receiver)
    links = ch.h[peers, receiver, :]  # rows h[k, receiver]
    norms2 = np.sum(np.abs(links) ** 2, axis=1)
    if np.any(norms2 <= 0):
        raise DataError(f"zero channel vector towards receiver {receiver}")
    eta = float(P0 * norms2.min())
    p = np.zeros((ch.K, ch.Nt), dtype=complex)
    p[peers] = np.sqrt(eta) * links / norms2[:, None]
    return p, eta


def single_agg_design(ch: ChannelSet, P0: float) -> SingleAggregationDesign:
    slots = [single_agg_slot(ch, P0, receiver) for receiver in range(ch.K)]
    return SingleAggregationDesign(
        p=np.stack([p for p, _ in slots]),
        eta=np.array([eta for _, eta in slots]),
    )


def single_agg_mse(design: SingleAggregationDesign, sigma2: float, V: float, D: int) -> float:
    """Sum over slots of the receiving device's error; alignment is exact, only noise remains."""
    K = design.K
    return float(np.sum(D * V ** 2 * sigma2 / ((K - 1) ** 2 * design.eta)))


def simulate_single_agg(
    ch: ChannelSet,
    design: SingleAggregationDesign,
    s: np.ndarray,
    stats: NormalizationStats,
    sigma2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the K slots in order; in slot l only device l listens."""
    s = np.asarray(s, dtype=float)
    K = ch.K
    if s.shape[0] != K:
        raise DimensionError(f"symbols must have K={K} rows, got {s.shape}")
    r = np.empty(s.shape)
    for receiver in range(K):
        gains = np.einsum("kn,kn->k", ch.h[:, receiver, :].conj(), design.p[receiver])
        received = gains @ s + np.sqrt(sigma2) * complex_gaussian(rng, s.shape[1])
        r[receiver] = (stats.V / ((K - 1) * np.sqrt(design.eta[receiver])) * received + stats.M).real
    return r


# ==================== Digital TDMA ====================

def quantize(z: np.ndarray, bits: int) -> np.ndarray:
    """Uniform quantiser with 2^bits levels over the observed range of z."""
    if bits < 1:
        raise ConfigurationError("quantisation needs at least one bit", key="quantization_bits")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DataError("states must be finite")
    low, high = float(z.min()), float(z.max())
    if high == low:
        return z.copy()
    levels = 2.0 ** bits - 1.0
    step = (high - low) / levels
    return low + np.round((z - low) / step) * step


def digital_aggregate(z: np.ndarray, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Exact peer averages of the quantised states (error-free transmission)."""
    return peer_average(quantize(z, bits))


def zf_link_gains(ch: ChannelSet) -> np.ndarray:
    """
    |h[k, l]^H w_{k, l}|^2 for unit-norm ZF precoder columns w; entry [k, l]
    equals 1 / [(H_k^H H_k)^{-1}]_{ll}. Diagonal is zero.
    """
    gains = np.zeros((ch.K, ch.K))
    for k in range(ch.K):
        Hk = device_matrix(ch, k)
        inverse = gram_solve(Hk, np.eye(ch.K - 1, dtype=complex), device=k)
        gains[k, ch.peers(k)] = 1.0 / np.real(np.diag(inverse))
    return gains


def digital_slot_latency(D: int, bits: int, B: float, snr: np.ndarray | float) -> np.ndarray | float:
    """Seconds to deliver D*bits bits at rate B*log2(1 + snr)."""
    return D * bits / (B * np.log2(1.0 + np.asarray(snr)))


# ==================== Latency model ====================

@dataclass(frozen=True)
class LatencyModel:
    """Per-round latency of one scheme under a system configuration."""
    scheme: LatencyScheme
    K: int
    D: int
    B: float
    P0: float
    sigma2: float
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.bits < 1:
            raise ConfigurationError("quantisation needs at least one bit", key="quantization_bits")

    @classmethod
    def from_system(cls, scheme: LatencyScheme, system: SystemConfig, bits: int = DEFAULT_BITS) -> "LatencyModel":
        return cls(
            scheme=LatencyScheme(scheme),
            K=system.K,
            D=system.D,
            B=system.B,
            P0=system.P0,
            sigma2=system.sigma2,
            bits=bits,
        )


def round_latency(model: LatencyModel, ch: Optional[ChannelSet] = None) -> float:
    """
    Distributed AirComp needs one round of D symbols, single aggregation needs
    K such slots, and digital TDMA gives each transmitter a slot long enough
    for its slowest peer link.
    """
    if model.scheme == LatencyScheme.DISTRIBUTED_AIRCOMP:
        return model.D / model.B
    if model.scheme == LatencyScheme.SINGLE_AGG:
        return model.K * model.D / model.B
    if ch is None:
        raise DataError("digital latency needs a channel realisation")
    snr = model.P0 * zf_link_gains(ch) / model.sigma2
    off = ~np.eye(ch.K, dtype=bool)
    slots = np.where(off, digital_slot_latency(model.D, model.bits, model.B, np.where(off, snr, 1.0)), 0.0)
    return float(np.sum(slots.max(axis=1)))
