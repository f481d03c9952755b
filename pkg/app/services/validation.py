"""
Oracle suite behind the ``validate`` command.

Every check draws its instances from fixed substreams of the experiment seed and
reports a measured value against a threshold, so two runs with the same experiment spec
print byte-identical reports. The "full" scale runs the acceptance instance
and trial counts; "quick" runs a few percent of them.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from app.models.schemas import BisectionConfig, ExperimentSpec, RunConfig, Scheme, SystemConfig, TaskKind
from app.services.aggregators import get_aggregator
from app.services.aircomp_signal import (
    analytic_mse,
    compute_stats,
    distortion_bias,
    empirical_mse,
    normalize,
    peer_average,
    simulate_round,
)
from app.services.channel import ChannelSet, device_matrix, sample_rician, substream
from app.services.dual_averaging import complete_graph_mixing, dual_deviation_bound, run, xi
from app.services.mmse_beamforming import FULL_POWER_TOL, brute_force_mmse, kkt_residuals, mmse_design
from app.services.tasks import make_task
from app.services.zf_beamforming import zf_design, zf_mse_upper_bound


logger = logging.getLogger(__name__)

BIAS_DIM = 1
MSE_Z_LIMIT = 4.0
BIAS_Z_LIMIT = 3.0
ORACLE_BISECTION = BisectionConfig(eps_alpha=1e-10)
HIGH_SNR_DB = 30.0

STREAM_ZF = 3_000_001
STREAM_TINY = 3_000_002
STREAM_MSE = 3_000_003
STREAM_BIAS = 3_000_004
STREAM_DUAL = 3_000_005


@dataclass(frozen=True)
class ValidationScale:
    """Instance and trial counts of one validate run."""
    zf_instances: int
    zf_sizes: tuple[int, ...]
    tiny_instances: int
    mse_instances: int
    mse_trials: int
    bias_trials: int
    dual_rounds: int
    dual_sizes: tuple[int, ...]
    dual_snrs_db: tuple[float, ...]


SCALES = {
    "full": ValidationScale(
        zf_instances=1000,
        zf_sizes=(3, 5, 10),
        tiny_instances=50,
        mse_instances=20,
        mse_trials=10_000,
        bias_trials=10_000,
        dual_rounds=500,
        dual_sizes=(5, 10),
        dual_snrs_db=(0.0, 10.0, 20.0),
    ),
    "quick": ValidationScale(
        zf_instances=30,
        zf_sizes=(3, 5),
        tiny_instances=10,
        mse_instances=3,
        mse_trials=2000,
        bias_trials=4000,
        dual_rounds=200,
        dual_sizes=(5,),
        dual_snrs_db=(10.0,),
    ),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def as_row(self) -> dict:
        return {
            "check": self.name,
            "passed": self.passed,
            "measured": self.measured,
            "threshold": self.threshold,
            "detail": self.detail,
        }

    def render(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        line = f"{verdict}  {self.name:<26} measured={self.measured:.6e}  threshold={self.threshold:.3e}"
        return f"{line}  {self.detail}" if self.detail else line


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def render(self) -> str:
        failed = sum(not check.passed for check in self.checks)
        lines = [check.render() for check in self.checks]
        lines.append(f"{len(self.checks) - failed}/{len(self.checks)} checks passed")
        return "\n".join(lines) + "\n"


def _upper_check(name: str, measured: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(measured <= threshold), measured=float(measured),
                       threshold=threshold, detail=detail)


def _system(spec: ExperimentSpec, **update) -> SystemConfig:
    return spec.system.model_copy(update=update)


def _scale(spec: ExperimentSpec) -> ValidationScale:
    return SCALES[spec.validation_scale]


# ==================== Zero forcing ====================

def _zf_instances(spec: ExperimentSpec) -> list[tuple[SystemConfig, ChannelSet]]:
    instances = []
    scale = _scale(spec)
    for i in range(scale.zf_instances):
        K = scale.zf_sizes[i % len(scale.zf_sizes)]
        system = _system(spec, K=K, Nt=2 * (K - 1))
        instances.append((system, sample_rician(system, STREAM_ZF, i)))
    return instances


def check_zero_forcing(spec: ExperimentSpec) -> list[CheckResult]:
    alignment, binding, dominance = 0.0, 0.0, 0.0
    for system, ch in _zf_instances(spec):
        sol = zf_design(ch, system.P0)
        K = ch.K
        for k in range(K):
            residual = np.linalg.norm(device_matrix(ch, k).conj().T @ sol.p[k] - np.sqrt(sol.eta))
            alignment = max(alignment, residual / (np.sqrt(sol.eta) * np.sqrt(K - 1)))
        powers = sol.powers
        binding = max(binding, abs(powers.max() - system.P0) / system.P0)
        mse = analytic_mse(ch, sol, system.sigma2, 1.0, system.D)
        bound = zf_mse_upper_bound(ch, system.P0, system.sigma2, 1.0, system.D)
        dominance = max(dominance, mse / bound)
    return [
        _upper_check("zf_alignment", alignment, 1e-8),
        _upper_check("zf_binding_power", binding, 1e-8),
        _upper_check("zf_bound_dominance", dominance, 1.0 + 1e-12, "max ZF MSE / bound"),
    ]


# ==================== MMSE ====================

def _tiny_instances(spec: ExperimentSpec) -> list[tuple[SystemConfig, ChannelSet]]:
    instances = []
    for i in range(_scale(spec).tiny_instances):
        K, Nt = ((2, 1), (2, 2), (3, 2))[i % 3]
        system = _system(spec, K=K, Nt=Nt, sigma2=spec.system.P0 / 10.0)
        instances.append((system, sample_rician(system, STREAM_TINY, i)))
    return instances


def check_mmse(spec: ExperimentSpec) -> list[CheckResult]:
    oracle_gap, kkt, full_power, dominance = 0.0, 0.0, 0.0, -np.inf
    for system, ch in _tiny_instances(spec):
        sol = mmse_design(ch, system.P0, system.sigma2, ORACLE_BISECTION)
        oracle = brute_force_mmse(ch, system.P0, system.sigma2)
        zf = zf_design(ch, system.P0)
        mse = analytic_mse(ch, sol, system.sigma2, 1.0, 1)
        mse_oracle = analytic_mse(ch, oracle, system.sigma2, 1.0, 1)
        oracle_gap = max(oracle_gap, abs(mse - mse_oracle) / mse_oracle)
        if sol.diagnostics["incumbent"] == "bisection":
            kkt = max(kkt, kkt_residuals(ch, sol, system.sigma2).max_residual)
        full_power = max(full_power, 1.0 - sol.powers.max() / system.P0)
        dominance = max(dominance, mse - analytic_mse(ch, zf, system.sigma2, 1.0, 1))
    return [
        _upper_check("mmse_oracle_gap", oracle_gap, 0.01, "relative MSE gap to grid oracle"),
        _upper_check("mmse_kkt", kkt, 1e-6),
        _upper_check("mmse_full_power", full_power, FULL_POWER_TOL),
        _upper_check("mmse_vs_zf", dominance, 1e-6, "max MSE_mmse - MSE_zf"),
    ]


# ==================== Monte Carlo consistency ====================

def check_mse_consistency(spec: ExperimentSpec) -> list[CheckResult]:
    """
    Empirical against analytic sum error. inject_eta_scale rescales eta in
    the simulated receiver only, which the check must catch.
    """
    scale = _scale(spec)
    results = []
    for scheme in (Scheme.ZF, Scheme.MMSE):
        worst = 0.0
        for i in range(scale.mse_instances):
            snr = HIGH_SNR_DB if i % 2 == 0 else spec.system.snr_db
            system = spec.system.with_snr(snr)
            ch = sample_rician(system, STREAM_MSE, i)
            sol = zf_design(ch, system.P0) if scheme == Scheme.ZF else mmse_design(ch, system.P0, system.sigma2)
            simulated = replace(sol, eta=sol.eta * spec.inject_eta_scale)
            stats = compute_stats(np.array([[-1.0], [1.0]]))
            estimate, stderr = empirical_mse(
                ch, simulated, stats, system.sigma2, scale.mse_trials, substream(system.seed, STREAM_MSE, i)
            )
            analytic = analytic_mse(ch, sol, system.sigma2, stats.V, 1)
            worst = max(worst, abs(estimate - analytic) / stderr)
        results.append(
            _upper_check(f"mse_consistency_{scheme.value.lower()}", worst, MSE_Z_LIMIT, "|emp - analytic| / s.e.")
        )
    return results


def _bias_z(ch: ChannelSet, sol, sigma2: float, beta: float, trials: int, rng: np.random.Generator) -> float:
    """Largest |z-score| of the mean aggregation error against the predicted bias."""
    z = 1.0 + rng.standard_normal((ch.K, BIAS_DIM))
    stats = compute_stats(z)
    s = normalize(z, stats)
    errors = np.stack([
        beta * (simulate_round(ch, sol, s, stats, sigma2, rng) - peer_average(z)) for _ in range(trials)
    ])
    predicted = distortion_bias(ch, sol, s, beta, stats.V, physical=True)
    stderr = errors.std(axis=0, ddof=1) / np.sqrt(trials)
    return float(np.max(np.abs(errors.mean(axis=0) - predicted) / stderr))


def check_bias(spec: ExperimentSpec) -> list[CheckResult]:
    system = spec.system
    trials = _scale(spec).bias_trials
    ch = sample_rician(system, STREAM_BIAS, 0)
    beta = spec.run.beta
    zf = zf_design(ch, system.P0)
    mmse = mmse_design(ch, system.P0, system.sigma2)
    return [
        _upper_check("bias_zf", _bias_z(ch, zf, system.sigma2, beta, trials, substream(system.seed, STREAM_BIAS, 1)),
                     BIAS_Z_LIMIT),
        _upper_check("bias_mmse", _bias_z(ch, mmse, system.sigma2, beta, trials, substream(system.seed, STREAM_BIAS, 2)),
                     BIAS_Z_LIMIT),
    ]


# ==================== Consensus ====================

def check_dual_deviation(spec: ExperimentSpec) -> list[CheckResult]:
    """Measured max_k ||z_bar - z_k|| over ZF runs against the deviation bound, worst configuration."""
    scale = _scale(spec)
    cfg = RunConfig(rounds=scale.dual_rounds, beta=spec.run.beta)
    worst, where = 0.0, ""
    for K in scale.dual_sizes:
        for snr in scale.dual_snrs_db:
            system = _system(spec, K=K, Nt=max(spec.system.Nt, 2 * (K - 1))).with_snr(snr)
            task = make_task(TaskKind.QUADRATIC_CONSENSUS, K, system.D, substream(system.seed, STREAM_DUAL, K))
            mixing = complete_graph_mixing(K, cfg.beta)
            trace = run(task, mixing, get_aggregator("AIRCOMP_ZF", system), cfg, seed=system.seed)
            xi_value = xi(task.Omega, cfg.beta, float(trace.mse_series().max()), K)
            bound = dual_deviation_bound(xi_value, cfg.beta, mixing.lambda2, cfg.rounds, K)
            ratio = float(trace.dual_deviations().max()) / bound
            if ratio >= worst:
                worst, where = ratio, f"K={K} snr={snr:g}dB"
    return [_upper_check("dual_deviation", worst, 1.0, f"max deviation / bound at {where}")]


CHECKS: list[Callable[[ExperimentSpec], list[CheckResult]]] = [
    check_zero_forcing,
    check_mmse,
    check_mse_consistency,
    check_bias,
    check_dual_deviation,
]


def run_validation(spec: ExperimentSpec) -> ValidationReport:
    report = ValidationReport()
    for check in CHECKS:
        results = check(spec)
        for result in results:
            logger.info(result.render())
        report.checks.extend(results)
    return report
