"""Named random sub-streams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (e.g. "init", "data", "masks", "batches")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *(int(e) for e in extra)])
