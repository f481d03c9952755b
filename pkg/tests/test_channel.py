"""
Rician D2D channel draws: statistics, indexing, determinism and validation.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.core.errors import ConfigurationError, DimensionError
from app.models.schemas import SystemConfig
from app.services.channel import (
    ChannelSet,
    channel_from_links,
    device_matrix,
    los_phase,
    sample_rician,
    substream,
)


def _entries(cfg: SystemConfig, rounds: int):
    """Off-diagonal channel entries with their LoS phases, over several rounds."""
    values, phases = [], []
    for n in range(rounds):
        ch = sample_rician(cfg, n)
        for k in range(cfg.K):
            for l in ch.peers(k):
                values.append(ch.link(k, l))
                phases.append(los_phase(k, l, cfg.Nt))
    return np.concatenate(values), np.concatenate(phases)


class TestRicianStatistics:
    """Unit average power and the split between LoS and scatter."""

    def test_unit_average_power(self):
        cfg = SystemConfig(K=2, Nt=500, rician_ratio=0.6, seed=3)
        values, _ = _entries(cfg, 100)
        power = np.abs(values) ** 2
        stderr = power.std(ddof=1) / np.sqrt(power.size)
        assert abs(power.mean() - 1.0) <= 4 * stderr

    def test_los_component_magnitude(self):
        cfg = SystemConfig(K=2, Nt=500, rician_ratio=0.6, seed=5)
        values, phases = _entries(cfg, 100)
        projected = values * phases.conj()
        stderr = projected.real.std(ddof=1) / np.sqrt(projected.size)
        assert abs(projected.real.mean() - np.sqrt(0.6 / 1.6)) <= 4 * stderr
        assert abs(projected.imag.mean()) <= 4 * stderr

    def test_pure_scatter_has_zero_mean(self):
        cfg = SystemConfig(K=2, Nt=500, rician_ratio=0.0, seed=9)
        values, _ = _entries(cfg, 50)
        stderr = np.sqrt(0.5 / values.size)
        assert abs(values.real.mean()) <= 4 * stderr
        assert abs(values.imag.mean()) <= 4 * stderr
        np.testing.assert_allclose(np.mean(np.abs(values) ** 2), 1.0, atol=0.02)

    def test_los_limit_has_unit_modulus(self):
        ch = sample_rician(SystemConfig(K=3, Nt=2, rician_ratio=1e9, seed=1), 0)
        for k in range(3):
            for l in ch.peers(k):
                np.testing.assert_allclose(np.abs(ch.link(k, l)), 1.0, atol=1e-4)
                np.testing.assert_allclose(ch.link(k, l), los_phase(k, l, 2), atol=1e-4)


class TestDeterminism:
    """Draws depend only on (seed, trial, round, k, l)."""

    def test_same_inputs_same_draw(self, system):
        np.testing.assert_array_equal(sample_rician(system, 3).h, sample_rician(system, 3).h)

    def test_call_order_does_not_matter(self, system):
        first = [sample_rician(system, n).h for n in (1, 3)]
        second = [sample_rician(system, n).h for n in (3, 1)][::-1]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_threads_do_not_change_draws(self, system):
        serial = [sample_rician(system, n).h for n in range(6)]
        with ThreadPoolExecutor(max_workers=3) as pool:
            threaded = list(pool.map(lambda n: sample_rician(system, n).h, range(6)))
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a, b)

    def test_rounds_and_trials_differ(self, system):
        base = sample_rician(system, 0).h
        assert not np.allclose(base, sample_rician(system, 1).h)
        assert not np.allclose(base, sample_rician(system, 0, trial=1).h)

    def test_seed_changes_draw(self, system):
        other = system.model_copy(update={"seed": system.seed + 1})
        assert not np.allclose(sample_rician(system, 0).h, sample_rician(other, 0).h)

    def test_substreams_are_independent_of_creation_order(self):
        a = substream(0, 1, 2).standard_normal(4)
        substream(0, 9, 9).standard_normal(100)
        np.testing.assert_array_equal(a, substream(0, 1, 2).standard_normal(4))


class TestChannelSet:
    """Shape, indexing and immutability."""

    def test_shape_and_zero_diagonal(self, channel, system):
        assert channel.h.shape == (system.K, system.K, system.Nt)
        for k in range(system.K):
            np.testing.assert_array_equal(channel.h[k, k], 0.0)

    def test_read_only(self, channel):
        with pytest.raises(ValueError):
            channel.h[0, 1, 0] = 1.0

    def test_no_self_link(self, channel):
        with pytest.raises(DimensionError):
            channel.link(2, 2)

    def test_rejects_non_finite(self):
        h = np.zeros((2, 2, 1), dtype=complex)
        h[0, 1, 0] = np.nan
        with pytest.raises(DimensionError):
            ChannelSet(round_index=0, h=h)

    def test_rejects_bad_shape(self):
        with pytest.raises(DimensionError):
            ChannelSet(round_index=0, h=np.zeros((2, 3, 1)))

    def test_reciprocal_draws(self):
        ch = sample_rician(SystemConfig(K=4, Nt=3, reciprocal=True, seed=2), 0)
        for k in range(4):
            for l in ch.peers(k):
                np.testing.assert_array_equal(ch.link(k, l), ch.link(l, k))

    def test_non_reciprocal_draws_differ(self, channel):
        assert not np.allclose(channel.link(0, 1), channel.link(1, 0))


class TestDeviceMatrix:
    """H_k stacks the outgoing links of device k, peers ascending."""

    def test_columns(self):
        links = {(k, l): [10.0 * k + l, -(10.0 * k + l)] for k in range(3) for l in range(3) if k != l}
        ch = channel_from_links(links, K=3)
        np.testing.assert_array_equal(device_matrix(ch, 1), np.array([[10.0, 12.0], [-10.0, -12.0]]))
        np.testing.assert_array_equal(device_matrix(ch, 0)[:, 1], [2.0, -2.0])

    def test_shape(self, channel, system):
        assert device_matrix(channel, 0).shape == (system.Nt, system.K - 1)

    def test_out_of_range(self, channel):
        with pytest.raises(DimensionError):
            device_matrix(channel, 5)

    def test_missing_link(self):
        with pytest.raises(DimensionError):
            channel_from_links({(0, 1): [1.0]}, K=2)

    def test_inconsistent_link_length(self):
        with pytest.raises(DimensionError):
            channel_from_links({(0, 1): [1.0], (1, 0): [1.0, 2.0]}, K=2)


class TestConfigValidation:
    """Configs built without validation are re-checked before sampling."""

    def test_unvalidated_config_is_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_rician(SystemConfig.model_construct(K=5, Nt=2), 0)
