"""
MMSE multicast beamforming: closed-form scaling, the power-minimisation
subproblem, bisection, optimality conditions and the grid oracle.
"""
import csv
from dataclasses import replace

import numpy as np
import pytest

from app.core.errors import (
    DataError,
    DegenerateBeamformerError,
    DimensionError,
    InstanceTooLargeError,
    SolverError,
)
from app.models.schemas import BisectionConfig, SystemConfig
from app.services.aircomp_signal import analytic_mse
from app.services.channel import device_matrix, sample_rician
from app.services.mmse_beamforming import (
    FULL_POWER_TOL,
    TRACE_COLUMNS,
    aligned_fraction,
    brute_force_mmse,
    centroid_direction,
    conditional_eta,
    feasibility_limit,
    kkt_residuals,
    mmse_design,
    mse_from_fraction,
    solve_power_min,
    write_solver_trace,
)
from app.services.zf_beamforming import zf_design


TIGHT = BisectionConfig(eps_alpha=1e-10)


def _draws(K, Nt, count, seed=0, sigma2=0.1):
    system = SystemConfig(K=K, Nt=Nt, sigma2=sigma2, seed=seed)
    return [sample_rician(system, n) for n in range(count)]


class TestConditionalEta:
    """Closed-form receive scaling for fixed beamformers."""

    def test_scalar_pair(self, scalar_pair):
        assert conditional_eta(scalar_pair, np.array([[1.0], [1.0]]), 1.0) == pytest.approx(4.0)
        p = 0.7
        expected = ((1.0 + p ** 2) / p) ** 2
        assert conditional_eta(scalar_pair, np.array([[p], [p]]), 1.0) == pytest.approx(expected)

    def test_minimises_the_error_over_eta(self, channel):
        sol = mmse_design(channel, 1.0, 0.1)
        best = analytic_mse(channel, sol, 0.1, 1.0, 1)
        for eta in np.geomspace(sol.eta / 10.0, sol.eta * 10.0, 1000):
            assert analytic_mse(channel, replace(sol, eta=eta), 0.1, 1.0, 1) >= best * (1.0 - 1e-8)

    def test_zero_beamformers(self, channel):
        with pytest.raises(DegenerateBeamformerError):
            conditional_eta(channel, np.zeros((channel.K, channel.Nt)), 0.1)

    def test_shape(self, channel):
        with pytest.raises(DimensionError):
            conditional_eta(channel, np.ones((channel.K, channel.Nt + 1)), 0.1)


class TestAlignedFraction:
    """The error at the optimal scaling depends on the beamformers only through F(p)."""

    def test_error_from_fraction(self, channel, rng):
        p = (rng.standard_normal((channel.K, channel.Nt)) + 1j * rng.standard_normal((channel.K, channel.Nt))) / 2
        if aligned_fraction(channel, p, 0.1) < 0:
            p = -p
        fraction = aligned_fraction(channel, p, 0.1)
        sol = zf_design(channel, 1.0)
        sol = replace(sol, p=p, eta=conditional_eta(channel, p, 0.1))
        np.testing.assert_allclose(
            analytic_mse(channel, sol, 0.1, 1.3, 4), mse_from_fraction(fraction, channel.K, 4, 1.3), rtol=1e-9
        )

    def test_sign_flip(self, channel, rng):
        p = rng.standard_normal((channel.K, channel.Nt)) + 0j
        assert aligned_fraction(channel, -p, 0.1) == pytest.approx(-aligned_fraction(channel, p, 0.1))
        fraction = aligned_fraction(channel, p, 0.1)
        assert mse_from_fraction(fraction, 5, 1, 1.0) == pytest.approx(mse_from_fraction(-fraction, 5, 1, 1.0))

    def test_scalar_pair(self, scalar_pair):
        assert aligned_fraction(scalar_pair, np.array([[1.0], [1.0]]), 1.0) == pytest.approx(1.0)

    def test_limit_for_full_rank_channels(self, wide_channel):
        K = wide_channel.K
        assert feasibility_limit(wide_channel) == pytest.approx(np.sqrt(K * (K - 1)))

    def test_fraction_below_the_limit(self, wide_channel, rng):
        limit = feasibility_limit(wide_channel)
        for _ in range(20):
            p = rng.standard_normal((wide_channel.K, wide_channel.Nt)) + 1j * rng.standard_normal(
                (wide_channel.K, wide_channel.Nt)
            )
            assert aligned_fraction(wide_channel, p, 0.1) < limit


class TestSolvePowerMin:
    """Minimal peak power for a target aligned fraction."""

    def test_scalar_pair(self, scalar_pair):
        p, p_max, _ = solve_power_min(scalar_pair, 1.0, 1.0)
        assert p_max == pytest.approx(1.0, rel=1e-6)
        np.testing.assert_allclose(p, [[1.0], [1.0]], atol=1e-4)

    def test_tiny_fraction_needs_almost_no_power(self, channel):
        _, p_max, _ = solve_power_min(channel, 1e-9, 0.1)
        assert p_max <= 1e-6

    def test_meets_the_target(self, wide_channel):
        p, p_max, _ = solve_power_min(wide_channel, 2.0, 0.1)
        assert aligned_fraction(wide_channel, p, 0.1) >= 2.0 * (1.0 - 1e-6)
        assert np.max(np.sum(np.abs(p) ** 2, axis=1)) == pytest.approx(p_max)

    def test_monotone_in_alpha(self, wide_channel):
        limit = feasibility_limit(wide_channel)
        rng = np.random.default_rng(5)
        for _ in range(20):
            a1, a2 = np.sort(rng.uniform(0.05, 0.95, size=2)) * limit
            p1 = solve_power_min(wide_channel, a1, 0.1).p_max
            p2 = solve_power_min(wide_channel, a2, 0.1).p_max
            assert p1 <= p2 * (1.0 + 1e-6)

    def test_alpha_must_be_positive(self, channel):
        with pytest.raises(DataError):
            solve_power_min(channel, 0.0, 0.1)

    def test_unattainable_alpha(self, wide_channel):
        with pytest.raises(SolverError):
            solve_power_min(wide_channel, 1.01 * feasibility_limit(wide_channel), 0.1)

    def test_trace_rows(self, wide_channel, tmp_path):
        result = solve_power_min(wide_channel, 1.0, 0.1, BisectionConfig(record_trace=True))
        assert result.trace and set(result.trace[0]) == set(TRACE_COLUMNS)
        path = write_solver_trace(result.trace, tmp_path / "trace.csv")
        with path.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == len(result.trace)
        assert list(rows[0]) == TRACE_COLUMNS


class TestMmseDesign:
    """Bisection with full-power polish and the ZF incumbent."""

    def test_scalar_pair(self, scalar_pair):
        sol = mmse_design(scalar_pair, 1.0, 1.0, TIGHT)
        np.testing.assert_allclose(np.abs(sol.p), [[1.0], [1.0]], atol=1e-4)
        assert sol.eta == pytest.approx(4.0, rel=1e-5)
        assert analytic_mse(scalar_pair, sol, 1.0, 1.0, 1) == pytest.approx(1.0, rel=1e-5)
        assert analytic_mse(scalar_pair, zf_design(scalar_pair, 1.0), 1.0, 1.0, 1) == pytest.approx(2.0)

    def test_full_power_and_budget(self):
        for ch in _draws(4, 6, 5, seed=2):
            sol = mmse_design(ch, 1.0, 0.1)
            assert sol.satisfies_power(1.0)
            assert sol.powers.max() >= 1.0 - FULL_POWER_TOL

    def test_never_worse_than_zero_forcing(self):
        for ch in _draws(5, 4, 10, seed=3):
            mmse = analytic_mse(ch, mmse_design(ch, 1.0, 0.1), 0.1, 1.0, 1)
            zf = analytic_mse(ch, zf_design(ch, 1.0), 0.1, 1.0, 1)
            assert mmse <= zf + 1e-6

    def test_noiseless_limit_matches_zero_forcing(self, wide_channel):
        sigma2 = 1e-8
        mmse = analytic_mse(wide_channel, mmse_design(wide_channel, 1.0, sigma2), sigma2, 1.0, 1)
        zf = analytic_mse(wide_channel, zf_design(wide_channel, 1.0), sigma2, 1.0, 1)
        assert abs(mmse - zf) / zf <= 1e-4

    def test_bisection_certificate(self, wide_channel):
        sol = mmse_design(wide_channel, 1.0, 0.1)
        diag = sol.diagnostics
        assert diag["alpha_upper"] - diag["alpha_lower"] < 1e-6
        assert solve_power_min(wide_channel, diag["alpha_lower"], 0.1).p_max <= 1.0
        if diag["alpha_upper"] < diag["alpha_limit"] * (1.0 - 1e-9):
            assert solve_power_min(wide_channel, diag["alpha_upper"], 0.1).p_max > 1.0
        assert sol.alpha == pytest.approx(aligned_fraction(wide_channel, sol.p, 0.1))
        assert sol.alpha >= diag["alpha_lower"] * (1.0 - 1e-9)

    def test_positive_aligned_sum(self, channel):
        sol = mmse_design(channel, 1.0, 0.1)
        assert aligned_fraction(channel, sol.p, 0.1) > 0

    def test_needs_noise(self, channel):
        with pytest.raises(DataError):
            mmse_design(channel, 1.0, 0.0)


class TestKkt:
    """Stationarity and complementary slackness at the returned beamformers."""

    def test_residuals_at_the_optimum(self, wide_channel):
        sol = mmse_design(wide_channel, 1.0, 0.1, TIGHT)
        report = kkt_residuals(wide_channel, sol, 0.1)
        assert report.max_residual <= 1e-6
        assert report.lam > 0

    def test_partial_power_devices_carry_no_multiplier(self, wide_channel):
        sol = mmse_design(wide_channel, 1.0, 0.1, TIGHT)
        report = kkt_residuals(wide_channel, sol, 0.1)
        partial = [k for k in range(wide_channel.K) if k not in report.full_power_devices]
        np.testing.assert_array_equal(report.nu[partial], 0.0)
        assert report.complementary_slackness <= 1e-6

    def test_perturbed_point_is_detected(self, wide_channel):
        sol = mmse_design(wide_channel, 1.0, 0.1, TIGHT)
        report = kkt_residuals(wide_channel, replace(sol, p=0.9 * sol.p), 0.1, alpha=sol.alpha)
        assert report.max_residual > 1e-3

    def test_needs_alpha(self, wide_channel):
        sol = zf_design(wide_channel, 1.0)
        with pytest.raises(DataError):
            kkt_residuals(wide_channel, sol, 0.1)


class TestCentroid:
    """Normalised column sum of the inversion precoder."""

    def test_identity(self):
        for mode in ("partial", "full"):
            np.testing.assert_allclose(centroid_direction(np.eye(3), mode), np.ones(3) / np.sqrt(3.0))

    def test_modes_agree_without_regularisation(self, channel):
        Hk = device_matrix(channel, 0)
        np.testing.assert_allclose(centroid_direction(Hk, "full"), centroid_direction(Hk, "partial"), atol=1e-6)

    def test_partial_mode_needs_a_square_matrix(self, wide_channel):
        with pytest.raises(DimensionError):
            centroid_direction(device_matrix(wide_channel, 0), "partial")

    def test_unknown_mode(self):
        with pytest.raises(DataError):
            centroid_direction(np.eye(2), "median")

    def test_partial_power_devices_point_at_the_centroid(self):
        sigma2 = 0.01
        checked = 0
        for ch in _draws(4, 3, 4, seed=6, sigma2=sigma2):
            sol = mmse_design(ch, 1.0, sigma2, TIGHT)
            for k in np.flatnonzero(sol.powers < 1.0 - 1e-3):
                d = centroid_direction(device_matrix(ch, k), "partial")
                cosine = abs(np.vdot(d, sol.p[k])) / np.linalg.norm(sol.p[k])
                assert cosine >= 1.0 - 1e-4
                checked += 1
        assert checked > 0


class TestBruteForce:
    """Grid oracle over the phase-aligned family."""

    def test_matches_bisection_on_the_scalar_pair(self, scalar_pair):
        oracle = brute_force_mmse(scalar_pair, 1.0, 1.0)
        design = mmse_design(scalar_pair, 1.0, 1.0, TIGHT)
        mse_oracle = analytic_mse(scalar_pair, oracle, 1.0, 1.0, 1)
        mse_design = analytic_mse(scalar_pair, design, 1.0, 1.0, 1)
        assert abs(mse_design - mse_oracle) / mse_oracle <= 0.01

    @pytest.mark.parametrize("K, Nt", [(2, 2), (3, 2)])
    def test_matches_bisection_on_tiny_instances(self, K, Nt):
        for ch in _draws(K, Nt, 3, seed=K + Nt):
            oracle = analytic_mse(ch, brute_force_mmse(ch, 1.0, 0.1), 0.1, 1.0, 1)
            design = analytic_mse(ch, mmse_design(ch, 1.0, 0.1, TIGHT), 0.1, 1.0, 1)
            zf = analytic_mse(ch, zf_design(ch, 1.0), 0.1, 1.0, 1)
            assert abs(design - oracle) / oracle <= 0.01
            assert zf >= oracle * (1.0 - 0.01)

    def test_refinement_never_hurts(self):
        ch = _draws(3, 2, 1, seed=9)[0]
        coarse = analytic_mse(ch, brute_force_mmse(ch, 1.0, 0.1, grid_resolution=2e-3), 0.1, 1.0, 1)
        fine = analytic_mse(ch, brute_force_mmse(ch, 1.0, 0.1, grid_resolution=1e-3), 0.1, 1.0, 1)
        assert fine <= coarse * (1.0 + 1e-9)

    def test_respects_the_budget(self):
        ch = _draws(3, 2, 1, seed=10)[0]
        assert brute_force_mmse(ch, 0.5, 0.1).satisfies_power(0.5)

    def test_size_guard(self, channel):
        with pytest.raises(InstanceTooLargeError):
            brute_force_mmse(channel, 1.0, 0.1)
