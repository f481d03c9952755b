"""
Experiment runners behind the CLI subcommands and the HTTP service.

Each runner takes an ExperimentSpec and returns a list of row dicts in CSV
column order. Trials fan out over a thread pool; results are collected in
index order so identical specs give identical rows.
"""
import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, TypeVar

import numpy as np

from app.core.config import build_system_config
from app.core.errors import ConfigurationError
from app.models.schemas import AggregatorKind, ExperimentSpec, LatencyScheme, Scheme, SystemConfig
from app.services.aggregators import get_aggregator
from app.services.aircomp_signal import analytic_mse
from app.services.benchmarks import LatencyModel, round_latency, single_agg_design, single_agg_mse
from app.services.channel import ChannelSet, sample_rician, substream
from app.services.dual_averaging import TRACE_COLUMNS, mixing_for, run
from app.services.mmse_beamforming import mmse_design
from app.services.tasks import make_task
from app.services.validation import ValidationReport, run_validation
from app.services.zf_beamforming import zf_design


logger = logging.getLogger(__name__)

T = TypeVar("T")

TASK_STREAM = 2_000_001

SWEEP_COLUMNS = ["sweep_var", "value", "scheme", "mse_mean", "mse_stderr", "trials", "seed", "config_hash", "feasible"]
LATENCY_COLUMNS = ["K", "scheme", "latency_mean_s", "latency_stderr", "trials", "seed", "config_hash", "feasible"]
TRAIN_COLUMNS = ["scheme", "trial", "sweep_var", "value", *TRACE_COLUMNS, "seed", "config_hash"]
BEAMFORM_COLUMNS = ["scheme", "device", "power", "eta", "alpha", "mse", "seed", "config_hash"]
VALIDATE_COLUMNS = ["check", "passed", "measured", "threshold", "detail", "seed", "config_hash"]

SCHEME_ALIASES = {
    "ZF": AggregatorKind.AIRCOMP_ZF,
    "MMSE": AggregatorKind.AIRCOMP_MMSE,
}


# ==================== Helpers ====================

def config_hash(spec: ExperimentSpec) -> str:
    """First 12 hex digits of the sha256 of the experiment spec's canonical JSON."""
    payload = spec.model_dump(mode="json", exclude={"output", "threads"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def fan_out(fn: Callable[[Any], T], items: Iterable[Any], threads: int = 1) -> list[T]:
    """Map fn over items, optionally on a thread pool, preserving input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_csv(rows: list[dict], path: Path | str, columns: list[str]) -> Path:
    """RFC-4180 CSV with a header row, UTF-8."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore", lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(rows)
    logger.info("wrote %d rows to %s", len(rows), path)
    return path


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def point_system(base: SystemConfig, sweep_var: Optional[str], value: float) -> SystemConfig:
    """The system configuration of one grid point; raises ConfigurationError if infeasible."""
    if sweep_var is None:
        return base
    if sweep_var == "snr_db":
        return base.with_snr(float(value))
    fields = base.model_dump()
    fields[sweep_var] = int(value)
    return build_system_config(**fields)


def scheme_mse(scheme: Scheme, ch: ChannelSet, system: SystemConfig, spec: ExperimentSpec, V: float = 1.0) -> float:
    """Analytic sum AirComp error of one scheme on one draw."""
    if scheme == Scheme.ZF:
        return analytic_mse(ch, zf_design(ch, system.P0), system.sigma2, V, system.D)
    if scheme == Scheme.MMSE:
        return analytic_mse(ch, mmse_design(ch, system.P0, system.sigma2, spec.bisection), system.sigma2, V, system.D)
    return single_agg_mse(single_agg_design(ch, system.P0), system.sigma2, V, system.D)


def aggregator_kind(name: str) -> AggregatorKind:
    if name in SCHEME_ALIASES:
        return SCHEME_ALIASES[name]
    try:
        return AggregatorKind(name)
    except ValueError as exc:
        raise ConfigurationError(f"unknown scheme '{name}'", key="schemes") from exc


def _schemes(spec: ExperimentSpec) -> list[Scheme]:
    try:
        return [Scheme(name) for name in spec.schemes]
    except ValueError as exc:
        raise ConfigurationError(f"{exc}; expected one of {[s.value for s in Scheme]}", key="schemes") from exc


# ==================== MSE sweep ====================

def cmd_mse_sweep(spec: ExperimentSpec) -> list[dict]:
    """Mean analytic MSE per grid point and scheme over spec.trials channel draws."""
    schemes = _schemes(spec)
    digest = config_hash(spec)
    sweep_var = spec.sweep_var or "snr_db"
    rows = []

    for value in spec.grid:
        try:
            system = point_system(spec.system, sweep_var, value)
        except ConfigurationError as exc:
            logger.warning("skipping %s=%s: %s", sweep_var, value, exc)
            rows.extend(
                {"sweep_var": sweep_var, "value": value, "scheme": scheme.value, "mse_mean": "",
                 "mse_stderr": "", "trials": 0, "seed": spec.system.seed, "config_hash": digest,
                 "feasible": False}
                for scheme in schemes
            )
            continue

        def trial_mse(trial: int) -> list[float]:
            ch = sample_rician(system, 0, trial)
            return [scheme_mse(scheme, ch, system, spec) for scheme in schemes]

        results = np.array(fan_out(trial_mse, range(spec.trials), spec.threads))
        for j, scheme in enumerate(schemes):
            mean, stderr = _mean_stderr(results[:, j])
            rows.append({
                "sweep_var": sweep_var,
                "value": value,
                "scheme": scheme.value,
                "mse_mean": mean,
                "mse_stderr": stderr,
                "trials": spec.trials,
                "seed": system.seed,
                "config_hash": digest,
                "feasible": True,
            })
        logger.info("%s=%s done (%d trials)", sweep_var, value, spec.trials)
    return rows


# ==================== Latency sweep ====================

LATENCY_ALIASES = {
    "ZF": LatencyScheme.DISTRIBUTED_AIRCOMP,
    "MMSE": LatencyScheme.DISTRIBUTED_AIRCOMP,
    "AIRCOMP_ZF": LatencyScheme.DISTRIBUTED_AIRCOMP,
    "AIRCOMP_MMSE": LatencyScheme.DISTRIBUTED_AIRCOMP,
}


def latency_schemes(spec: ExperimentSpec) -> list[LatencyScheme]:
    """Schemes named in the experiment, or all of them when schemes is left at its default."""
    if "schemes" not in spec.model_fields_set:
        return list(LatencyScheme)
    chosen: list[LatencyScheme] = []
    for name in spec.schemes:
        try:
            scheme = LATENCY_ALIASES.get(name) or LatencyScheme(name)
        except ValueError as exc:
            raise ConfigurationError(f"unknown latency scheme '{name}'", key="schemes") from exc
        if scheme not in chosen:
            chosen.append(scheme)
    return chosen


def cmd_latency_sweep(spec: ExperimentSpec) -> list[dict]:
    """Per-round latency against the number of devices K."""
    schemes = latency_schemes(spec)
    digest = config_hash(spec)
    bits = spec.run.quantization_bits
    rows = []

    for value in spec.grid:
        K = int(value)
        try:
            system = point_system(spec.system, "K", K)
        except ConfigurationError as exc:
            logger.warning("skipping K=%d: %s", K, exc)
            rows.extend(
                {"K": K, "scheme": scheme.value, "latency_mean_s": "", "latency_stderr": "", "trials": 0,
                 "seed": spec.system.seed, "config_hash": digest, "feasible": False}
                for scheme in schemes
            )
            continue

        for scheme in schemes:
            model = LatencyModel.from_system(scheme, system, bits=bits)
            if scheme == LatencyScheme.DIGITAL:
                latencies = fan_out(
                    lambda trial: round_latency(model, sample_rician(system, 0, trial)),
                    range(spec.trials),
                    spec.threads,
                )
            else:
                latencies = [round_latency(model)] * spec.trials
            mean, stderr = _mean_stderr(np.array(latencies))
            rows.append({
                "K": K,
                "scheme": scheme.value,
                "latency_mean_s": mean,
                "latency_stderr": stderr,
                "trials": spec.trials,
                "seed": system.seed,
                "config_hash": digest,
                "feasible": True,
            })
    return rows


# ==================== Training ====================

def train_trace(spec: ExperimentSpec, system: SystemConfig, kind: AggregatorKind, trial: int):
    """One seeded optimisation run; the task depends on (seed, trial) only, so schemes are paired."""
    task = make_task(
        spec.task,
        system.K,
        system.D,
        substream(system.seed, trial, TASK_STREAM),
        heterogeneous=spec.heterogeneous,
        gradient_noise=spec.run.gradient_noise,
    )
    aggregator = get_aggregator(
        kind,
        system,
        trial=trial,
        bits=spec.run.quantization_bits,
        bisection=spec.bisection.model_copy(update={"inner_tol": spec.run.mmse_inner_tol}),
    )
    mixing = mixing_for(spec.run, system.K)
    return run(task, mixing, aggregator, spec.run, seed=system.seed, trial=trial)


def cmd_train(spec: ExperimentSpec) -> list[dict]:
    """OptTrace rows for every grid point, scheme and trial."""
    kinds = [aggregator_kind(name) for name in spec.schemes]
    if spec.run.topology != "complete" and any(kind != AggregatorKind.IDEAL for kind in kinds):
        raise ConfigurationError(
            f"topology {spec.run.topology!r} needs IDEAL aggregation; over-the-air transports average uniformly",
            key="run.topology",
        )
    digest = config_hash(spec)
    points = spec.grid if spec.sweep_var else [None]
    rows = []

    for value in points:
        system = point_system(spec.system, spec.sweep_var, value)
        for kind in kinds:
            traces = fan_out(lambda trial: train_trace(spec, system, kind, trial), range(spec.trials), spec.threads)
            for trial, trace in enumerate(traces):
                for row in trace.to_rows():
                    rows.append({
                        "scheme": kind.value,
                        "trial": trial,
                        "sweep_var": spec.sweep_var or "",
                        "value": "" if value is None else value,
                        **row,
                        "seed": system.seed,
                        "config_hash": digest,
                    })
            final = np.mean([trace.final_gaps().mean() for trace in traces])
            logger.info("%s (%s=%s): mean final gap %.4e", kind.value, spec.sweep_var, value, final)
    return rows


# ==================== Single-draw design summary ====================

def cmd_beamform(spec: ExperimentSpec) -> list[dict]:
    """Per-device powers and alignment factors of each scheme on one channel draw."""
    system = spec.system
    digest = config_hash(spec)
    ch = sample_rician(system, 0, 0)
    rows = []
    for scheme in _schemes(spec):
        mse = scheme_mse(scheme, ch, system, spec)
        if scheme == Scheme.SINGLE_AGG:
            design = single_agg_design(ch, system.P0)
            powers = np.sum(np.abs(design.p) ** 2, axis=2).max(axis=0)
            etas, alpha = design.eta, None
        else:
            sol = zf_design(ch, system.P0) if scheme == Scheme.ZF else mmse_design(
                ch, system.P0, system.sigma2, spec.bisection
            )
            powers, etas, alpha = sol.powers, np.full(ch.K, sol.eta), sol.alpha
        for device in range(ch.K):
            rows.append({
                "scheme": scheme.value,
                "device": device,
                "power": float(powers[device]),
                "eta": float(etas[device]),
                "alpha": "" if alpha is None else alpha,
                "mse": mse,
                "seed": system.seed,
                "config_hash": digest,
            })
    return rows


# ==================== Validation ====================

def cmd_validate(spec: ExperimentSpec) -> tuple[list[dict], ValidationReport]:
    """Run the oracle suite; rows carry one line per check."""
    digest = config_hash(spec)
    report = run_validation(spec)
    rows = [
        {**check.as_row(), "seed": spec.system.seed, "config_hash": digest}
        for check in report.checks
    ]
    return rows, report


COMMANDS: dict[str, tuple[Callable[[ExperimentSpec], Any], list[str]]] = {
    "mse_sweep": (cmd_mse_sweep, SWEEP_COLUMNS),
    "latency_sweep": (cmd_latency_sweep, LATENCY_COLUMNS),
    "train": (cmd_train, TRAIN_COLUMNS),
    "beamform": (cmd_beamform, BEAMFORM_COLUMNS),
    "validate": (cmd_validate, VALIDATE_COLUMNS),
}
