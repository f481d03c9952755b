"""
Command-line entry point: ``python -m app.cli <subcommand> [flags]``.

Exit status is 0 on success, 1 when ``validate`` reports a failed check and
2 on configuration or numerical errors.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from app.core.config import get_settings, load_experiment_spec
from app.core.errors import AirCompError
from app.core.logging import banner, setup_logging
from app.services.experiments import COMMANDS, config_hash, write_csv


logger = logging.getLogger("app.cli")

SUBCOMMANDS = {
    "mse-sweep": "mse_sweep",
    "latency-sweep": "latency_sweep",
    "train": "train",
    "beamform": "beamform",
    "validate": "validate",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aircomp",
        description="Distributed AirComp beamforming and decentralized optimisation experiments",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=None, help="Logging level (defaults to settings)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.add_argument("--config", type=Path, default=None, help="key = value experiment config file")
        sub.add_argument("--seed", type=int, default=None, help="master RNG seed (unsigned 64-bit)")
        sub.add_argument("--out", type=Path, default=None, help="CSV output path")
        sub.add_argument("--trials", type=int, default=None, help="channel draws or seeds per grid point")
        sub.add_argument("--threads", type=int, default=None, help="worker threads for trials")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    settings = get_settings()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level)

    kind = SUBCOMMANDS[args.command]
    try:
        spec = load_experiment_spec(
            args.config,
            kind=kind,
            seed=args.seed,
            trials=args.trials,
            threads=args.threads,
            output=str(args.out) if args.out else None,
        )
        banner(logger, f"{settings.app_name} {args.command}", {
            "config_hash": config_hash(spec),
            "seed": spec.system.seed,
            "K / Nt": f"{spec.system.K} / {spec.system.Nt}",
            "SNR (dB)": f"{spec.system.snr_db:.2f}",
            "trials": spec.trials,
        })

        runner, columns = COMMANDS[kind]
        result = runner(spec)
        rows, report = result if kind == "validate" else (result, None)
        out = Path(spec.output) if spec.output else settings.output_dir / f"{kind}.csv"
        write_csv(rows, out, columns)
    except AirCompError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2

    if report is not None:
        sys.stdout.write(report.render())
        return 0 if report.passed else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
