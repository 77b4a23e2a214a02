from __future__ import annotations

import logging
import tomllib
from collections.abc import Mapping
from dataclasses import fields, replace
from pathlib import Path
from typing import Any

from .domain import ConfigError, TrainingConfig

_logger = logging.getLogger(__name__)

_FIELD_TYPES: dict[str, tuple[type, ...]] = {
    "curvature": (float, int),
    "dim": (int,),
    "proxy_lr": (float, int),
    "lr": (float, int),
    "beta_lr": (float, int),
    "weight_decay": (float, int),
    "batch_size": (int,),
    "epochs": (int,),
    "seed": (int,),
    "space": (str,),
    "aggregation": (str,),
    "regularization": (str,),
    "beta": (float, int),
    "negatives": (int,),
    "patience": (int,),
    "eval_k": (int,),
    "test_ratio": (float, int),
    "valid_ratio": (float, int),
    "kcore": (int,),
    "exclude_validation": (bool,),
}


def _check(values: Mapping[str, Any], source: str) -> dict[str, Any]:
    known = {f.name for f in fields(TrainingConfig)}
    out: dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{source}: unknown key '{key}'")
        if isinstance(value, dict | list):
            raise ConfigError(f"{source}: '{key}' must be a scalar, not a table or array")
        allowed = _FIELD_TYPES[key]
        # bool is an int subclass; only accept it where a bool is expected
        if isinstance(value, bool) and bool not in allowed or not isinstance(value, allowed):
            raise ConfigError(f"{source}: '{key}' has wrong type {type(value).__name__}")
        out[key] = float(value) if float in allowed and not isinstance(value, bool) else value
    return out


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a flat TOML file of ``key = value`` pairs naming ``TrainingConfig`` fields."""
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return _check(data, str(path))


def resolve_config(
    path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    base: TrainingConfig | None = None,
) -> TrainingConfig:
    """Defaults, then the config file, then explicit overrides; ``None`` overrides are skipped."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(load_config_file(path))
    if overrides:
        values.update(_check({k: v for k, v in overrides.items() if v is not None}, "override"))
    config = replace(base or TrainingConfig(), **values)
    _logger.debug("effective config: %s", config.as_dict())
    return config
