import os
import logging
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv, dotenv_values
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from app.errors import ConfigError

# Load environment variables from a .env file if present
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "SALSTRUCT_"

ARCHITECTURES = ("single", "dual", "rgb", "rgb_ls", "rgb_ts")
FOV_FALLBACKS = ("error", "full-frame")


class RunConfig(BaseModel):
    """Every knob of a reproducible run; defaults follow the published schedule."""

    seed: int = 7
    resolution: int = 64
    detect_resolution: int = 224
    architecture: str = "dual"
    widths: Tuple[int, ...] = (8, 16, 32)
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    lr_after_drop: float = 0.001
    lr_drop_epoch: int = 10
    augment: bool = True
    rotation_range: float = 30.0
    val_fraction: float = 0.1
    fov_fallback: str = "error"
    workers: int = 1
    export_maps: bool = False
    trials: int = 1

    @field_validator("widths", mode="before")
    @classmethod
    def _parse_widths(cls, value: Any) -> Any:
        # config files and env vars carry "8,16,32"
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("architecture")
    @classmethod
    def _check_architecture(cls, value: str) -> str:
        if value not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        return value

    @field_validator("fov_fallback")
    @classmethod
    def _check_fallback(cls, value: str) -> str:
        if value not in FOV_FALLBACKS:
            raise ValueError(f"fov_fallback must be one of {FOV_FALLBACKS}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if not self.widths:
            raise ValueError("widths must name at least one block")
        if self.resolution < 1 or self.resolution % (2 ** len(self.widths)) != 0:
            raise ValueError(
                f"resolution {self.resolution} must be divisible by 2^{len(self.widths)}"
            )
        if self.detect_resolution < 64:
            raise ValueError("detect_resolution must be >= 64")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self


def _normalize_keys(values: Dict[str, Any]) -> Dict[str, Any]:
    return {key.strip().lower().replace("-", "_"): value for key, value in values.items()}


def _env_values() -> Dict[str, Any]:
    found = {}
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            found[key[len(ENV_PREFIX):]] = value
    # stray SALSTRUCT_* variables (paths for tests etc.) are not config keys
    return {k: v for k, v in _normalize_keys(found).items() if k in RunConfig.model_fields}


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Resolve a RunConfig from defaults, environment, config file and flags.

    Args:
        config_path: Optional key=value file (same syntax as a .env file)
        overrides: Values given on the command line; None entries are ignored

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: unknown keys, unreadable file or invalid values
    """
    merged: Dict[str, Any] = {}
    merged.update(_env_values())

    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        file_values = _normalize_keys(dict(dotenv_values(config_path)))
        logger.info(f"Loaded {len(file_values)} settings from {config_path}")
        merged.update(file_values)

    if overrides:
        merged.update({k: v for k, v in _normalize_keys(overrides).items() if v is not None})

    unknown = sorted(set(merged) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
