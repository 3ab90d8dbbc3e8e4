"""YAML config files covering every tunable section, with field-level validation."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import yaml

from .bench import OfflineConfig, OnlineConfig
from .datapipe import SamplerConfig
from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .tracker import TrackerConfig
from .trainer import TrainConfig

SECTION_TYPES = {
    "model": ModelConfig,
    "loss": LossConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
    "tracker": TrackerConfig,
    "online": OnlineConfig,
    "offline": OfflineConfig,
}


def build_section(section: str, data: dict[str, Any]):
    cls = SECTION_TYPES[section]
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown field")
    try:
        if cls is ModelConfig:
            return ModelConfig.from_dict(data)
        return cls(**data)
    except ConfigError as err:
        raise ConfigError(f"{section}.{err.field}", str(err).split(": ", 1)[-1]) from err
    except TypeError as err:
        raise ConfigError(section, str(err)) from err


def load_config_file(path: str | Path | None, overrides: dict[str, dict] | None = None) -> dict:
    """Parse a YAML config into dataclass sections; missing sections use defaults."""
    raw: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping of sections")
        raw = loaded
    for section in raw:
        if section not in SECTION_TYPES:
            raise ConfigError(section, "unknown config section")
    merged: dict[str, dict] = {s: dict(raw.get(s, {})) for s in SECTION_TYPES}
    for section, extra in (overrides or {}).items():
        merged.setdefault(section, {}).update(
            {k: v for k, v in extra.items() if v is not None}
        )
    return {s: build_section(s, d) for s, d in merged.items()}


def config_to_dict(sections: dict) -> dict:
    out = {}
    for name, cfg in sections.items():
        d = dataclasses.asdict(cfg)
        if name == "model":
            d["backbone_channels"] = list(d["backbone_channels"])
        out[name] = d
    return out
