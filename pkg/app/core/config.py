"""
Application configuration using Pydantic Settings, plus the structured-text
experiment config loader.

Config files are flat ``key = value`` text with dotted sections::

    K = 5                     # bare keys belong to the system section
    system.Nt = 4
    system.P0_dbm = 30
    bisection.eps_alpha = 1e-6
    experiment.kind = mse_sweep
    experiment.grid = 0, 5, 10, 15, 20
"""
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError
from app.models.schemas import BisectionConfig, ExperimentSpec, RunConfig, SystemConfig


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # API Configuration
    app_name: str = "AirComp Lab"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # Experiment defaults
    default_seed: int = 0
    default_threads: int = 1
    api_max_trials: int = 2000

    output_dir: Path = Path("data") / "results"

    def setup_directories(self) -> None:
        """Create the results directory if it doesn't exist."""
        self.output_dir.mkdir(parents=True, exist_ok=True)


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# ==================== Structured-text config files ====================

SYSTEM_KEYS = {
    "K": "K",
    "Nt": "Nt",
    "D": "D",
    "P0_watt": "P0",
    "P0_dbm": "P0",
    "sigma2": "sigma2",
    "bandwidth_hz": "B",
    "rician_ratio": "rician_ratio",
    "seed": "seed",
    "reciprocal": "reciprocal",
}
LIST_KEYS = {"grid", "schemes"}
SECTIONS = ("system", "bisection", "run", "experiment")


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def read_sections(path: Path | str) -> dict[str, dict[str, str]]:
    """Split a config file into its dotted sections."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")

    sections: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    for raw_key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigurationError(f"missing value for '{raw_key}'", key=raw_key)
        section, _, key = raw_key.rpartition(".")
        section = section or "system"
        if section not in sections:
            raise ConfigurationError(f"unknown section '{section}'", key=raw_key)
        sections[section][key] = value.strip()
    return sections


def _system_fields(raw: dict[str, str]) -> dict[str, Any]:
    unknown = set(raw) - set(SYSTEM_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigurationError(f"unknown system key '{key}'", key=key)
    if "P0_dbm" in raw and "P0_watt" in raw:
        raise ConfigurationError("give either P0_dbm or P0_watt, not both", key="P0_dbm")

    fields: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "P0_dbm":
            try:
                fields["P0"] = dbm_to_watt(float(value))
            except ValueError as exc:
                raise ConfigurationError(f"bad value for P0_dbm: {value!r}", key=key) from exc
        else:
            fields[SYSTEM_KEYS[key]] = value
    return fields


def _validated(model: type, fields: dict[str, Any], section: str):
    try:
        return model.model_validate(fields)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or section
        raise ConfigurationError(f"{section}: {first['msg']}", key=f"{section}.{key}") from exc


def load_system_config(path: Path | str) -> SystemConfig:
    """Load only the system section of a config file."""
    return _validated(SystemConfig, _system_fields(read_sections(path)["system"]), "system")


def build_system_config(**fields: Any) -> SystemConfig:
    """Construct a SystemConfig, converting validation failures to ConfigurationError."""
    return _validated(SystemConfig, fields, "system")


def load_experiment_spec(path: Optional[Path | str] = None, **overrides: Any) -> ExperimentSpec:
    """
    Load an ExperimentSpec from a config file and apply keyword overrides
    (CLI flags). Overrides with value None are ignored.
    """
    sections = read_sections(path) if path is not None else {name: {} for name in SECTIONS}

    experiment: dict[str, Any] = {}
    for key, value in sections["experiment"].items():
        if key in LIST_KEYS:
            experiment[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            experiment[key] = value

    system_fields = _system_fields(sections["system"])
    seed = overrides.pop("seed", None)
    if seed is not None:
        system_fields["seed"] = seed

    experiment["system"] = _validated(SystemConfig, system_fields, "system")
    experiment["bisection"] = _validated(BisectionConfig, sections["bisection"], "bisection")
    experiment["run"] = _validated(RunConfig, sections["run"], "run")
    experiment.update({key: value for key, value in overrides.items() if value is not None})
    return _validated(ExperimentSpec, experiment, "experiment")
