import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

PROJECT_NAME = "ffa-synthesis"
PROJECT_VERSION = "1.0.0"

ConfigModel = TypeVar("ConfigModel", bound=BaseModel)


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="FFASYN_", case_sensitive=False, extra="ignore"
    )

    # Data locations
    data_root: str = "data/phantom"
    output_root: str = "runs"

    # Runtime
    device: str = "auto"
    log_level: str = "INFO"
    num_workers: int = 0
    progress_bars: bool = True

    # Optional pretrained inception weights for FID/KID/LPIPS
    extractor_weights: Optional[str] = None

    @property
    def log_level_value(self) -> int:
        return getattr(logging, self.log_level.upper(), logging.INFO)


# Synthesis profiles
SYNTH_PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {
        "image_size": 128,
        "batch_size": 4,
        "epochs": 20,
        "n_residual_blocks": 4,
    },
    "full": {
        "image_size": 1024,
        "batch_size": 2,
        "epochs": 100,
        "n_residual_blocks": 9,
    },
}


# Diagnosis profiles
DIAG_PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {
        "image_size": 128,
        "backbone": "resnet10",
        "batch_size": 8,
        "epochs": 15,
    },
    "full": {
        "image_size": 512,
        "backbone": "resnet50",
        "batch_size": 8,
        "epochs": 50,
    },
}


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Unreadable config file: {path}", details=str(e))
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return values


def resolve_config(
    model: Type[ConfigModel],
    overrides: Mapping[str, Any],
    profile: Optional[str] = None,
    profiles: Optional[Mapping[str, Mapping[str, Any]]] = None,
    config_file: Optional[str] = None,
) -> ConfigModel:
    """
    Build an experiment config: profile defaults < config file < explicit flags
    ``None`` overrides are treated as "flag not given"
    """
    values: Dict[str, Any] = {}
    if profiles is not None:
        if profile not in profiles:
            raise ConfigError(f"Unknown profile '{profile}'", details=f"expected one of {sorted(profiles)}")
        values.update(profiles[profile])
        values["profile"] = profile
    if config_file:
        values.update(load_config_file(config_file))
    values.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return model.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model.__name__}", details=str(e))


def config_from_args(
    model: Type[ConfigModel],
    args: Any,
    overrides: Mapping[str, Any],
    profiles: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> ConfigModel:
    """Resolve a command's config; a replayed run uses its recorded snapshot verbatim."""
    snapshot = getattr(args, "config_snapshot", None)
    if snapshot is not None:
        try:
            return model.model_validate(snapshot)
        except ValidationError as e:
            raise ConfigError(f"Invalid recorded {model.__name__}", details=str(e))
    return resolve_config(
        model, overrides, getattr(args, "profile", None), profiles, getattr(args, "config", None)
    )


settings = Settings()
