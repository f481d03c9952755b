"""
Channel service: Rician D2D channel realisations for one round.

Channels are indexed h[k, l] = channel vector from transmitter k to receiver l.
Every (seed, trial, round, k, l) tuple gets its own counter-based Philox
substream, so a ChannelSet does not depend on call order or threading.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import ValidationError

from app.core.errors import ConfigurationError, DimensionError
from app.models.schemas import SystemConfig


logger = logging.getLogger(__name__)


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the given key path under a master seed."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def los_phase(k: int, l: int, Nt: int) -> np.ndarray:
    """Deterministic unit-modulus LoS component of link k -> l."""
    antenna = np.arange(Nt)
    return np.exp(2j * np.pi * np.mod(0.1 * (k * 31 + l * 17 + antenna), 1.0))


def complex_gaussian(rng: np.random.Generator, size) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


@dataclass(frozen=True)
class ChannelSet:
    """All D2D channel vectors of one round; read-only after construction."""
    round_index: int
    h: np.ndarray = field(repr=False)  # (K, K, Nt), zero on the diagonal

    def __post_init__(self):
        h = np.array(self.h, dtype=complex)
        if h.ndim != 3 or h.shape[0] != h.shape[1]:
            raise DimensionError(f"channel array must be (K, K, Nt), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise DimensionError("channel entries must be finite")
        idx = np.arange(h.shape[0])
        h[idx, idx, :] = 0.0
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def K(self) -> int:
        return self.h.shape[0]

    @property
    def Nt(self) -> int:
        return self.h.shape[2]

    def link(self, k: int, l: int) -> np.ndarray:
        """Channel vector from transmitter k to receiver l."""
        if k == l:
            raise DimensionError("no self-link")
        return self.h[k, l]

    def peers(self, k: int) -> list[int]:
        return [l for l in range(self.K) if l != k]


def ensure_valid(cfg: SystemConfig) -> SystemConfig:
    """Re-validate a config that may have been built without validation."""
    try:
        return SystemConfig.model_validate(cfg.model_dump())
    except ValidationError as exc:
        raise ConfigurationError(str(exc.errors()[0]["msg"])) from exc


def sample_rician(cfg: SystemConfig, round_index: int, trial: int = 0) -> ChannelSet:
    """
    Draw one round of i.i.d. Rician channels with unit average power per entry.

    With reciprocal channels only the k < l links are drawn and h[l, k] reuses
    them.
    """
    cfg = ensure_valid(cfg)
    K, Nt, r = cfg.K, cfg.Nt, cfg.rician_ratio
    los_gain = np.sqrt(r / (1.0 + r))
    scatter_gain = np.sqrt(1.0 / (1.0 + r))

    h = np.zeros((K, K, Nt), dtype=complex)
    for k in range(K):
        for l in range(K):
            if k == l or (cfg.reciprocal and l < k):
                continue
            rng = substream(cfg.seed, trial, round_index, k, l)
            h[k, l] = los_gain * los_phase(k, l, Nt) + scatter_gain * complex_gaussian(rng, Nt)
            if cfg.reciprocal:
                h[l, k] = h[k, l]
    return ChannelSet(round_index=round_index, h=h)


def channel_from_links(links: dict[tuple[int, int], np.ndarray], K: int, round_index: int = 0) -> ChannelSet:
    """Assemble a ChannelSet from explicit link vectors."""
    missing = [(k, l) for k in range(K) for l in range(K) if k != l and (k, l) not in links]
    if missing:
        raise DimensionError(f"missing links: {missing[:3]}")
    Nt = len(np.atleast_1d(next(iter(links.values()))))
    h = np.zeros((K, K, Nt), dtype=complex)
    for (k, l), vec in links.items():
        vec = np.atleast_1d(np.asarray(vec, dtype=complex))
        if vec.shape != (Nt,):
            raise DimensionError(f"link ({k}, {l}) has shape {vec.shape}, expected ({Nt},)")
        h[k, l] = vec
    return ChannelSet(round_index=round_index, h=h)


def device_matrix(ch: ChannelSet, k: int) -> np.ndarray:
    """H_k: Nt x (K-1) matrix whose columns are h[k, l], l != k, ascending."""
    if not 0 <= k < ch.K:
        raise DimensionError(f"device index {k} out of range for K={ch.K}")
    return ch.h[k, ch.peers(k), :].T.copy()
