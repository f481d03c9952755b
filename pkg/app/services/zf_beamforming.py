"""
Zero-forcing distributed multicast beamforming.

Each device inverts its outgoing channels so every peer receives exactly
sqrt(eta) times its symbol; eta is then set by the weakest device's power budget.
"""
import logging

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.core.errors import DataError, SingularChannelError
from app.models.schemas import Scheme
from app.services.aircomp_signal import BeamformingSolution
from app.services.channel import ChannelSet, device_matrix


logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


def gram_solve(Hk: np.ndarray, rhs: np.ndarray, device: int | None = None) -> np.ndarray:
    """Solve (Hk^H Hk) x = rhs with a guarded Cholesky factorisation."""
    gram = Hk.conj().T @ Hk
    condition = np.linalg.cond(gram)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularChannelError(
            f"channel Gram matrix is singular (condition {condition:.3e})",
            device=device,
            condition=float(condition),
        )
    try:
        factor = cho_factor(gram)
    except LinAlgError as exc:
        raise SingularChannelError("Cholesky factorisation failed", device=device) from exc
    return cho_solve(factor, rhs)


def zf_beamformer(Hk: np.ndarray, eta: float, device: int | None = None) -> np.ndarray:
    """Minimum-norm p with Hk^H p = sqrt(eta) * 1."""
    if not eta > 0:
        raise DataError(f"eta must be positive, got {eta}")
    Hk = np.asarray(Hk, dtype=complex)
    ones = np.ones(Hk.shape[1], dtype=complex)
    return np.sqrt(eta) * (Hk @ gram_solve(Hk, ones, device))


def inverse_gram_load(ch: ChannelSet) -> np.ndarray:
    """Per-device 1^T (H_k^H H_k)^{-1} 1, the power a unit eta costs device k."""
    loads = np.empty(ch.K)
    for k in range(ch.K):
        Hk = device_matrix(ch, k)
        ones = np.ones(ch.K - 1, dtype=complex)
        loads[k] = np.real(ones @ gram_solve(Hk, ones, k))
    return loads


def zf_alignment_factor(ch: ChannelSet, P0: float) -> float:
    """Largest eta for which every ZF beamformer meets the power budget."""
    return float(np.min(P0 / inverse_gram_load(ch)))


def binding_device(ch: ChannelSet) -> int:
    """Device that transmits at full power under the optimal eta (lowest index on ties)."""
    return int(np.argmax(inverse_gram_load(ch)))


def zf_design(ch: ChannelSet, P0: float) -> BeamformingSolution:
    loads = inverse_gram_load(ch)
    binding = int(np.argmax(loads))
    eta = float(P0 / loads[binding])
    p = np.stack([zf_beamformer(device_matrix(ch, k), eta, k) for k in range(ch.K)])
    logger.debug("ZF design: eta=%.4e binding device=%d", eta, binding)
    return BeamformingSolution(
        scheme=Scheme.ZF,
        p=p,
        eta=eta,
        diagnostics={"binding_device": binding, "loads": loads},
    )


def min_gram_eigenvalue(ch: ChannelSet) -> float:
    """min over devices of lambda_min(H_k^H H_k)."""
    values = []
    for k in range(ch.K):
        Hk = device_matrix(ch, k)
        values.append(np.linalg.eigvalsh(Hk.conj().T @ Hk)[0])
    return float(min(values))


def zf_mse_upper_bound(ch: ChannelSet, P0: float, sigma2: float, V: float, D: int) -> float:
    """
    Rayleigh-quotient bound on the ZF sum AirComp error:
    K D V^2 sigma2 / ((K-1) P0 min_k lambda_min(H_k^H H_k)).
    """
    lam = min_gram_eigenvalue(ch)
    if lam <= 0:
        raise SingularChannelError(f"smallest Gram eigenvalue {lam:.3e} is not positive")
    K = ch.K
    return float(K * D * V ** 2 * sigma2 / ((K - 1) * P0 * lam))
