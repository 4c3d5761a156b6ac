"""Binary checkpoint format.

Layout::

    8 bytes   magic b"KGWCKPT\\0"
    4 bytes   little-endian uint32 format version
    8 bytes   little-endian uint64 manifest length N
    N bytes   UTF-8 JSON manifest {"params": [{"name", "shape"}...], "meta": {...}}
    ...       each parameter as little-endian float64, in manifest order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KGWCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    manifest = {
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", raw, 12)
    manifest = json.loads(raw[20 : 20 + n].decode("utf-8"))
    offset = 20 + n
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, manifest.get("meta", {})
