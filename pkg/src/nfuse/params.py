"""Flatten and rebuild dataclass trees of parameter tensors."""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np

from nfuse.tensor import Tensor


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Dotted-name -> Tensor for every tensor reachable through dataclass fields and lists."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


def with_tensors(obj, mapping: Mapping[str, Tensor], prefix: str = ""):
    """Copy of ``obj`` with tensors replaced by ``mapping`` entries of the same name."""
    if isinstance(obj, Tensor):
        new = mapping.get(prefix, obj)
        if new.shape != obj.shape:
            raise ValueError(f"{prefix}: shape {new.shape} does not match {obj.shape}")
        return new
    if dataclasses.is_dataclass(obj):
        changes = {
            f.name: with_tensors(getattr(obj, f.name), mapping, f"{prefix}.{f.name}" if prefix else f.name)
            for f in dataclasses.fields(obj)
        }
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [with_tensors(x, mapping, f"{prefix}.{i}" if prefix else str(i)) for i, x in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(with_tensors(x, mapping, f"{prefix}.{i}" if prefix else str(i)) for i, x in enumerate(obj))
    return obj


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), grad_enabled=True, dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), grad_enabled=True, dtype=dtype)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), grad_enabled=True, dtype=dtype)
