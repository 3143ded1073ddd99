"""Run configuration: nested dataclasses loaded from JSON with strict keys."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .data import SynthConfig
from .geometry import AnchorConfig, LabelConfig
from .loss import LossConfig
from .tracker import TrackerConfig
from .trainer import CropConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path or '<root>'}: {message}")
        self.key_path = key_path


@dataclass
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for section, fn in (("train", self.train.validate), ("tracker", self.tracker.validate),
                            ("synth", self.synth.validate)):
            try:
                fn()
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from None


def _check_scalar(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item_tp,) = args or (Any,)
        return [_check_scalar(v, item_tp, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(tp):
        return _overlay(tp(), value, path)
    return value


def _overlay(base: Any, data: Any, path: str) -> Any:
    """Return a copy of dataclass ``base`` with the keys of ``data`` applied."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(type(base))
    names = {f.name for f in dataclasses.fields(base)}
    updates = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown key")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            updates[key] = _overlay(getattr(base, key), value, sub)
        else:
            updates[key] = _check_scalar(value, tp, sub)
    try:
        return dataclasses.replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def preset_config(preset: str) -> RunConfig:
    if preset not in ("tiny", "paper"):
        raise ConfigError("preset", f"unknown preset {preset!r}")
    return RunConfig(preset=preset, backbone=BackboneConfig.from_preset(preset),
                     train=TrainConfig.from_preset(preset))


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "configuration must be a JSON object")
    preset = data.get("preset", "tiny")
    if not isinstance(preset, str):
        raise ConfigError("preset", "expected a string")
    cfg = _overlay(preset_config(preset), data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
