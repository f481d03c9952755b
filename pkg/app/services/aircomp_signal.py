"""
AirComp signal chain: normalisation, over-the-air superposition, receive
scaling and the analytic / Monte Carlo sum AirComp error.

Symbol arrays are (K, D): one row per device. Gains follow
G[k, l] = h[k, l]^H p_k, the aligned gain of transmitter k at receiver l.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.core.errors import DataError, DimensionError
from app.models.schemas import Scheme
from app.services.channel import ChannelSet, complex_gaussian


V_FLOOR = 1e-12
POWER_SLACK = 1e-8


@dataclass(frozen=True)
class NormalizationStats:
    """Round mean M and standard deviation V of the exchanged states."""
    M: float
    V: float

    def __post_init__(self):
        object.__setattr__(self, "V", max(float(self.V), V_FLOOR))


@dataclass
class BeamformingSolution:
    """Per-device multicast beamformers with their alignment factor."""
    scheme: Scheme
    p: np.ndarray  # (K, Nt) complex
    eta: float
    alpha: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=complex)
        if self.p.ndim != 2:
            raise DimensionError(f"beamformers must be (K, Nt), got {self.p.shape}")
        if not self.eta > 0:
            raise DataError(f"alignment factor must be positive, got {self.eta}")

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def powers(self) -> np.ndarray:
        return np.sum(np.abs(self.p) ** 2, axis=1)

    def satisfies_power(self, P0: float) -> bool:
        return bool(np.all(self.powers <= P0 * (1.0 + POWER_SLACK)))


@dataclass(frozen=True)
class AggregationReport:
    """Error breakdown of one design on one channel draw."""
    mse_analytic: float
    per_device_misalignment: np.ndarray  # (K, K-1)
    mse_empirical: Optional[float] = None
    mse_stderr: Optional[float] = None


class RunningStats:
    """Exponentially weighted running estimate of (M, V)."""

    def __init__(self, decay: float = 0.9):
        if not 0.0 <= decay < 1.0:
            raise DataError("decay must lie in [0, 1)")
        self.decay = decay
        self._mean: Optional[float] = None
        self._second: Optional[float] = None

    def update(self, z: np.ndarray) -> NormalizationStats:
        current = compute_stats(z)
        second = current.V ** 2 + current.M ** 2
        if self._mean is None:
            self._mean, self._second = current.M, second
        else:
            self._mean = self.decay * self._mean + (1 - self.decay) * current.M
            self._second = self.decay * self._second + (1 - self.decay) * second
        return self.current

    @property
    def current(self) -> NormalizationStats:
        if self._mean is None:
            raise DataError("no samples seen yet")
        return NormalizationStats(M=self._mean, V=np.sqrt(max(self._second - self._mean ** 2, 0.0)))


# ==================== Normalisation ====================

def compute_stats(z: np.ndarray) -> NormalizationStats:
    """Genie statistics over all K*D entries of the round's states."""
    z = np.asarray(z, dtype=float)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise DataError("states must be non-empty and finite")
    return NormalizationStats(M=float(np.mean(z)), V=float(np.std(z)))


def normalize(z: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DataError("states must be finite")
    return (z - stats.M) / stats.V


def denormalize(s: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(s) * stats.V + stats.M


# ==================== Channel-side quantities ====================

def aligned_gains(ch: ChannelSet, p: np.ndarray) -> np.ndarray:
    """G[k, l] = h[k, l]^H p_k (zero on the diagonal)."""
    p = np.asarray(p, dtype=complex)
    if p.shape != (ch.K, ch.Nt):
        raise DimensionError(f"beamformers {p.shape} do not match channels ({ch.K}, {ch.Nt})")
    return np.einsum("kln,kn->kl", ch.h.conj(), p)


def misalignment(ch: ChannelSet, sol: BeamformingSolution) -> np.ndarray:
    """K x (K-1) matrix of |h[k, l]^H p_k / sqrt(eta) - 1|^2, peers ascending."""
    G = aligned_gains(ch, sol.p) / np.sqrt(sol.eta)
    off = ~np.eye(ch.K, dtype=bool)
    return (np.abs(G - 1.0) ** 2)[off].reshape(ch.K, ch.K - 1)


def peer_average(z: np.ndarray) -> np.ndarray:
    """Ground truth (1/(K-1)) * sum_{l != k} z_l for every k."""
    z = np.asarray(z)
    K = z.shape[0]
    return (z.sum(axis=0, keepdims=True) - z) / (K - 1)


# ==================== Signal chain ====================

def simulate_round(
    ch: ChannelSet,
    sol: BeamformingSolution,
    s: np.ndarray,
    stats: NormalizationStats,
    sigma2: float,
    rng: np.random.Generator,
    real_part: bool = True,
) -> np.ndarray:
    """
    Over-the-air superposition at every receiver followed by scaling and
    de-normalisation: r_k = V/((K-1)sqrt(eta)) * (sum_l G[l, k] s_l + w~_k) + M.
    """
    s = np.asarray(s, dtype=float)
    K = ch.K
    if s.ndim != 2 or s.shape[0] != K:
        raise DimensionError(f"symbols must be (K={K}, D), got {s.shape}")
    if sol.p.shape != (K, ch.Nt):
        raise DimensionError(f"beamformers {sol.p.shape} do not match channels ({K}, {ch.Nt})")

    G = aligned_gains(ch, sol.p)
    received = G.T @ s  # row k: sum_l G[l, k] s_l
    received = received + np.sqrt(sigma2) * complex_gaussian(rng, s.shape)
    r = stats.V / ((K - 1) * np.sqrt(sol.eta)) * received + stats.M
    return r.real if real_part else r


def receiver_noise(
    sol: BeamformingSolution,
    stats: NormalizationStats,
    sigma2: float,
    D: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Scaled receiver noise w_k ~ CN(0, V^2 sigma2 / ((K-1)^2 eta) I), shape (K, D)."""
    K = sol.K
    scale = stats.V * np.sqrt(sigma2) / ((K - 1) * np.sqrt(sol.eta))
    return scale * complex_gaussian(rng, (K, D))


def analytic_mse(ch: ChannelSet, sol: BeamformingSolution, sigma2: float, V: float, D: int) -> float:
    """Sum AirComp error: misalignment term plus amplified noise term."""
    K = ch.K
    mis = misalignment(ch, sol).sum()
    return float(V ** 2 * D / (K - 1) ** 2 * mis + K * D * V ** 2 * sigma2 / ((K - 1) ** 2 * sol.eta))


def empirical_mse(
    ch: ChannelSet,
    sol: BeamformingSolution,
    stats: NormalizationStats,
    sigma2: float,
    trials: int,
    rng: np.random.Generator,
    D: int = 1,
) -> tuple[float, float]:
    """Monte Carlo estimate of the sum AirComp error and its standard error."""
    if trials < 2:
        raise DataError("empirical MSE needs at least two trials")
    K = ch.K
    errors = np.empty(trials)
    for t in range(trials):
        s = rng.standard_normal((K, D))
        z = denormalize(s, stats)
        r = simulate_round(ch, sol, s, stats, sigma2, rng, real_part=False)
        errors[t] = np.sum(np.abs(r - peer_average(z)) ** 2)
    return float(errors.mean()), float(errors.std(ddof=1) / np.sqrt(trials))


def aggregation_report(
    ch: ChannelSet,
    sol: BeamformingSolution,
    sigma2: float,
    V: float,
    D: int,
    empirical: Optional[tuple[float, float]] = None,
) -> AggregationReport:
    estimate, stderr = empirical if empirical is not None else (None, None)
    return AggregationReport(
        mse_analytic=analytic_mse(ch, sol, sigma2, V, D),
        per_device_misalignment=misalignment(ch, sol),
        mse_empirical=estimate,
        mse_stderr=stderr,
    )


# ==================== Distortion decomposition ====================

def _misalignment_weights(ch: ChannelSet, sol: BeamformingSolution, physical: bool) -> np.ndarray:
    """
    A[k, l] multiplies s_l in receiver k's distortion. The default pattern uses
    transmitter k's gain towards l, h[k, l]^H p_k / sqrt(eta) - 1; the physical
    pattern uses the gain actually seen at k, h[l, k]^H p_l / sqrt(eta) - 1.
    The two are transposes, so they share the summed squared error over
    devices for i.i.d. symbols. Summed distortion agrees only when every
    device sends the same symbol.
    """
    G = aligned_gains(ch, sol.p) / np.sqrt(sol.eta)
    A = (G.T if physical else G) - 1.0
    np.fill_diagonal(A, 0.0)
    return A


def distortion(
    ch: ChannelSet,
    sol: BeamformingSolution,
    s: np.ndarray,
    V: float,
    noise: np.ndarray,
    physical: bool = False,
) -> np.ndarray:
    """Delta_k = V/(K-1) * sum_{l != k} A[k, l] s_l + w_k."""
    s = np.asarray(s, dtype=float)
    noise = np.asarray(noise)
    K = ch.K
    if s.shape[0] != K or noise.shape != s.shape:
        raise DimensionError(f"symbols {s.shape} and noise {noise.shape} must both be (K={K}, D)")
    return V / (K - 1) * (_misalignment_weights(ch, sol, physical) @ s) + noise


def distortion_bias(
    ch: ChannelSet,
    sol: BeamformingSolution,
    mean_s: np.ndarray,
    beta: float,
    V: float,
    physical: bool = False,
) -> np.ndarray:
    """Real part of beta*V/(K-1) * sum_{l != k} A[k, l] E[s_l]."""
    mean_s = np.asarray(mean_s, dtype=float)
    if mean_s.shape[0] != ch.K:
        raise DimensionError(f"mean symbols must have K={ch.K} rows")
    return (beta * V / (ch.K - 1) * (_misalignment_weights(ch, sol, physical) @ mean_s)).real
