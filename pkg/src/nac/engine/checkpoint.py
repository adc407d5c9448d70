"""Binary weight checkpoints.

Layout: magic ``NACW``, one format-version byte, a little-endian uint32
record count, then per record::

    uint16 id length | id (utf-8) | uint8 itemsize (4 or 8) | uint8 ndim |
    uint32 * ndim dims | raw little-endian float data

A JSON manifest next to the binary lists the ids in file order plus any
extra metadata the caller wants to persist (epoch, rng state, ...).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"NACW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    manifest = {"format": "NACW", "version": VERSION, "ids": list(arrays), **(meta or {})}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4:5] != bytes([VERSION]):
        raise CheckpointError(f"{path}: unsupported version {raw[4:5]!r}")
    try:
        out, pos = _read_records(raw, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt record data ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    mpath = manifest_path(path)
    meta = json.loads(mpath.read_text()) if mpath.exists() else {}
    if meta and meta.get("ids") != list(out):
        raise CheckpointError(f"{mpath}: manifest ids do not match the binary")
    return out, meta


def _read_records(raw: bytes, path: Path) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", raw, 5)
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + klen].decode("utf-8")
        pos += klen
        itemsize, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = {4: np.dtype("<f4"), 8: np.dtype("<f8")}.get(itemsize)
        if dtype is None:
            raise CheckpointError(f"{path}: record {name!r} has itemsize {itemsize}")
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += n * itemsize
    return out, pos
