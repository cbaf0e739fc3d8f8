"""
Configuration files and environment defaults.

A config file is JSON with optional "model" and "train" sections. Environment
variables (a local .env file is honoured) supply defaults:

    HIERGEO_SEED        master seed when the config does not set one
    HIERGEO_LOG_LEVEL   logging level for the CLI (default WARNING)
    HIERGEO_CHECKPOINT  checkpoint used by the tool server and dashboard
    HIERGEO_TAXONOMY    taxonomy file used by the tool server and dashboard
"""

import json
import os
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

from geoloc.errors import ConfigError
from geoloc.model import ModelConfig
from geoloc.taxonomy import Taxonomy
from geoloc.training import TrainConfig

load_dotenv()


def env_seed(default: int = 0) -> int:
    value = os.getenv("HIERGEO_SEED")
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"HIERGEO_SEED must be an integer, got {value!r}") from None


def env_log_level(default: str = "WARNING") -> str:
    return os.getenv("HIERGEO_LOG_LEVEL", default).strip().upper() or default


def env_path(name: str) -> Optional[Path]:
    value = os.getenv(name)
    return Path(value) if value else None


def read_config_file(path: Optional[Union[str, Path]]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    unknown = set(data) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, value in data.items():
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {section!r} must be a JSON object")
    return data


def load_configs(
    path: Optional[Union[str, Path]],
    taxonomy: Taxonomy,
) -> tuple[ModelConfig, TrainConfig]:
    """
    Model and training configs for ``taxonomy``.

    Level sizes always come from the taxonomy. The seed falls back to
    HIERGEO_SEED and is shared by both configs unless one sets its own.
    """
    data = read_config_file(path)
    model_section = dict(data.get("model", {}))
    train_section = dict(data.get("train", {}))
    if "level_sizes" in model_section and tuple(model_section["level_sizes"]) != taxonomy.sizes:
        raise ConfigError(
            f"config level_sizes {model_section['level_sizes']} do not match taxonomy {taxonomy.sizes}"
        )
    model_section["level_sizes"] = list(taxonomy.sizes)
    seed = env_seed()
    model_section.setdefault("seed", train_section.get("seed", seed))
    train_section.setdefault("seed", model_section["seed"])

    model_config = ModelConfig.from_dict(model_section)
    train_config = TrainConfig.from_dict(train_section)
    model_config.validate()
    train_config.validate()
    return model_config, train_config
