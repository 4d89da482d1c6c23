"""Binary tensor dumps and manifest files of named tensors.

A single tensor dump is::

    b"TFTN" | version u8 = 1 | rank u8 | extents u64 LE * rank | data f32 LE

A manifest file bundles several dumps::

    b"TFMF" | version u8 = 1 | header length u64 LE | header JSON (utf-8) | dumps...

The JSON header holds ``{"meta": {...}, "tensors": [{"name", "offset", "shape"}]}``
where ``offset`` is the absolute byte position of each dump in the file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"TFTN"
MANIFEST_MAGIC = b"TFMF"
VERSION = 1


class FormatError(ValueError):
    pass


def dump_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _parse_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError("truncated tensor data")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, end


def load_tensor(buf: bytes) -> np.ndarray:
    arr, _ = _parse_tensor(buf)
    return arr


def save_manifest(path, tensors: Mapping[str, object], meta: dict | None = None) -> None:
    """Write named tensors (kept in insertion order) plus JSON metadata."""
    blobs = [(name, dump_tensor(t), np.shape(getattr(t, "data", t))) for name, t in tensors.items()]
    entries, rel = [], 0
    for name, blob, shape in blobs:
        entries.append({"name": name, "offset": rel, "shape": [int(n) for n in shape]})
        rel += len(blob)
    # offsets depend on header length, which depends on the offsets' digits; iterate to a fixed point
    base = 0
    while True:
        header = {"meta": meta or {}, "tensors": [dict(e, offset=e["offset"] + base) for e in entries]}
        raw = json.dumps(header, sort_keys=True).encode()
        new_base = 4 + 1 + 8 + len(raw)
        if new_base == base:
            break
        base = new_base
    with open(path, "wb") as fh:
        fh.write(MANIFEST_MAGIC + struct.pack("<BQ", VERSION, len(raw)) + raw)
        for _, blob, _ in blobs:
            fh.write(blob)


def load_manifest(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MANIFEST_MAGIC:
        raise FormatError(f"{path}: not a manifest file")
    version, length = struct.unpack_from("<BQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported manifest version {version}")
    header = json.loads(buf[13:13 + length].decode())
    tensors = {}
    for entry in header["tensors"]:
        arr, _ = _parse_tensor(buf, entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"shape mismatch for {entry['name']}")
        tensors[entry["name"]] = arr
    return tensors, header["meta"]
