"""Experiment configuration: one JSON document, strictly validated.

Example::

    {
      "seed": 0,
      "out": "runs/xor",
      "fuser": "tfusion",
      "precision": "f32",
      "task": {"correlation_mode": "xor_pair", "noise_std": 0.1},
      "train": {"steps": 2000, "lr": 1e-4},
      "block": {"depth": 2, "heads": 4}
    }

Omitted fields take desk-scale defaults.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from nfuse.harness.data import SyntheticTaskSpec
from nfuse.harness.model import FUSERS, BlockConfig, resolve_fuser
from nfuse.harness.optim import TrainConfig
from nfuse.tensor import DTYPES


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    fuser: str = "tfusion"
    precision: str = "f32"
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    block: BlockConfig = field(default_factory=BlockConfig)

    @property
    def resolved_fuser(self) -> str:
        return resolve_fuser(self.fuser, self.block)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        if "seed" in changes:
            cfg = dataclasses.replace(cfg, task=dataclasses.replace(cfg.task, seed=cfg.seed))
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list) or not value:
            raise ConfigError(path, f"expected a non-empty list, got {value!r}")
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(path, f"unsupported field type {hint}")


def _build(cls, data, path: str, skip=()):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub, skip=("seed",) if hint is SyntheticTaskSpec else ())
        else:
            kwargs[key] = _coerce(value, hint, sub)
    return cls(**kwargs)


def parse_config(data: dict) -> ExperimentConfig:
    """Build and validate a config.  ``task.seed`` may appear only as an echo of ``seed``."""
    data = dict(data)
    task = data.get("task")
    if isinstance(task, dict) and "seed" in task:
        task = dict(task)
        if task.pop("seed") != data.get("seed", 0):
            raise ConfigError("task.seed", "the task seed is derived from the top-level seed")
        data["task"] = task
    cfg = _build(ExperimentConfig, data, "")
    cfg = dataclasses.replace(cfg, task=dataclasses.replace(cfg.task, seed=cfg.seed))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed", "must be non-negative")
    if cfg.fuser not in FUSERS:
        raise ConfigError("fuser", f"must be one of {list(FUSERS)}")
    if cfg.precision not in DTYPES:
        raise ConfigError("precision", f"must be one of {sorted(DTYPES)}")
    for section in ("task", "train", "block"):
        try:
            getattr(cfg, section).validate()
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from exc
    if cfg.block.channels is not None and cfg.block.channels != cfg.task.channels:
        raise ConfigError("block.channels", "must equal task.channels")
    if cfg.task.channels % cfg.block.heads and cfg.resolved_fuser in ("tfusion", "tfusion_no_ma"):
        raise ConfigError("block.heads", f"must divide task.channels={cfg.task.channels}")
    if cfg.fuser != "tfusion" and cfg.block.variant != "full":
        raise ConfigError("block.variant", f"only applies to fuser 'tfusion', not {cfg.fuser!r}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)
