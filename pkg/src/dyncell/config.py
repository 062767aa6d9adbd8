"""Run configuration: one nested dataclass tree mirrored by the JSON file
passed via --config. Unknown keys are rejected so typos fail loudly."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DatasetConfig
from .search import SearchConfig
from .training import FinetuneConfig, StaticTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    train_frac: float = 0.9
    meta_val_frac: float = 0.1
    seed: int = 5


@dataclass
class ArchConfig:
    dec_width: int = 16
    widths: tuple[int, int, int] = (16, 24, 32)
    seed: int = 0


@dataclass
class AppConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    static_train: StaticTrainConfig = field(default_factory=StaticTrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


def _apply(obj, data: dict, path: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply(current, value, f"{path}{key}.")
        elif isinstance(value, dict):
            raise ConfigError(f"{path}{key} does not take a mapping")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)
    return obj


def load_config(path: Path | None) -> AppConfig:
    cfg = AppConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _apply(cfg, data, "")


def config_dict(cfg: AppConfig) -> dict:
    return dataclasses.asdict(cfg)
