import numpy as np
import pytest

from app.models.schemas import SystemConfig
from app.services.channel import channel_from_links, sample_rician


@pytest.fixture
def system():
    return SystemConfig(K=5, Nt=4, D=10, P0=1.0, sigma2=0.1, seed=7)


@pytest.fixture
def wide_system():
    """Twice the minimum antenna count, so every Gram matrix is well conditioned."""
    return SystemConfig(K=4, Nt=6, D=10, P0=1.0, sigma2=0.1, seed=11)


@pytest.fixture
def channel(system):
    return sample_rician(system, round_index=0)


@pytest.fixture
def wide_channel(wide_system):
    return sample_rician(wide_system, round_index=0)


@pytest.fixture
def scalar_pair():
    """K=2, Nt=1 with unit channels in both directions."""
    return channel_from_links({(0, 1): [1.0], (1, 0): [1.0]}, K=2)


@pytest.fixture
def identity_channel():
    """Builder for instances with Nt = K-1 and every H_k equal to the identity."""
    def build(K: int):
        eye = np.eye(K - 1)
        links = {}
        for k in range(K):
            peers = [l for l in range(K) if l != k]
            for j, l in enumerate(peers):
                links[(k, l)] = eye[j]
        return channel_from_links(links, K=K)
    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
