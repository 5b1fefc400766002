"""Flat key=value config files covering model dims and training knobs.

Line format: ``key = value``; blank lines and ``#`` comments are ignored.
``schema_version`` is required. Unknown keys are hard errors: a silent typo
in an RL config costs hours.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .policy import ModelConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1

_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str, typ: str):
    raw = raw.strip()
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    return raw


def parse_config(text: str) -> tuple[TrainConfig, ModelConfig]:
    seen: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = raw
    if "schema_version" not in seen:
        raise ConfigError("config is missing schema_version")
    if int(seen.pop("schema_version")) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version (expected {SCHEMA_VERSION})")
    train_kwargs = {}
    model_kwargs = {}
    for key, raw in seen.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _parse_value(key, raw, _TRAIN_FIELDS[key])
        elif key in _MODEL_FIELDS:
            model_kwargs[key] = _parse_value(key, raw, _MODEL_FIELDS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs)


def dump_config(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    for name in sorted(_TRAIN_FIELDS):
        lines.append(f"{name} = {getattr(train_cfg, name)}")
    for name in sorted(_MODEL_FIELDS):
        lines.append(f"{name} = {getattr(model_cfg, name)}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> tuple[TrainConfig, ModelConfig]:
    return parse_config(Path(path).read_text())


def save_config(path: str | Path, train_cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    Path(path).write_text(dump_config(train_cfg, model_cfg))
