"""Run configuration: a JSON document with sections data, augment, model,
loss, train and eval. Missing keys take their defaults; unknown keys are
rejected with the offending key path."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .augment import AugmentConfig
from .data import ToyConfig
from .evaluation import METRICS
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

PRESET_NAMES = {
    "baseline": "baseline.json",
    "DML-2": "dml-2.json",
    "DML-3": "dml-3.json",
    "LDS-2(1)": "lds-2-1.json",
    "LDS-2(2)": "lds-2-2.json",
    "LDS-2(3)": "lds-2-3.json",
    "LDS-2(4)": "lds-2-4.json",
    "LDS-2(5)": "lds-2-5.json",
    "LDS-3(1)": "lds-3-1.json",
    "LDS-3(2)": "lds-3-2.json",
    "LDS-3(3)": "lds-3-3.json",
    "LDS-3(3)-MS": "lds-3-3-ms.json",
}
ABLATION_PRESETS = tuple(n for n in PRESET_NAMES if not n.endswith("-MS"))


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "toy"
    root: Optional[str] = None
    toy: ToyConfig = field(default_factory=ToyConfig)
    toy_seed: int = 1


@dataclass
class EvalConfig:
    metric: str = "cosine"
    batch_size: int = 128


@dataclass
class RunConfig:
    name: str = "custom"
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.data.kind not in ("toy", "market"):
            raise ValueError(f"data.kind must be 'toy' or 'market', got {self.data.kind!r}")
        if self.data.kind == "market" and not self.data.root:
            raise ValueError("data.root is required for market data")
        if self.eval.metric not in METRICS:
            raise ValueError(f"eval.metric must be one of {METRICS}")
        if self.loss.kl_mode == "master_servant" and self.augment.num_branches < 2:
            raise ValueError("master_servant KL needs at least 2 branches")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SCALARS = (bool, int, float, str)


def _check_scalar(hint, value, path):
    if value is None:
        if type(None) in typing.get_args(hint) or hint is type(None):
            return
        raise ConfigError(f"{path}: null is not allowed")
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1:
            return _check_scalar(args[0], value, path)
        return
    if hint is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if hint is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if hint is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if hint is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if hint in (tuple, list) and not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    if hint is dict and not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {value!r}")


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, recursing into nested sections."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, sub)
        else:
            _check_scalar(hint, value, sub)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(RunConfig, data)


def preset_dict(name: str) -> dict:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    text = resources.files("lds_reid").joinpath("presets", PRESET_NAMES[name]).read_text()
    return json.loads(text)


def load_preset(name: str) -> RunConfig:
    return from_dict(RunConfig, preset_dict(name))


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Deep-merge ``overrides`` into a copy of ``data``."""
    out = json.loads(json.dumps(data))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = apply_overrides(out[key], value)
        else:
            out[key] = value
    return out
