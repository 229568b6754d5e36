"""Portable parameter checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"MSNCKPT1"
    offset 8   8 bytes   uint64 H, byte length of the JSON header
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          payload: float32 LE arrays, C order, back to back

The header is ``{"format": "msn-checkpoint", "version": 1, "dtype": "<f4",
"config": {...}, "params": [{"name", "shape", "offset", "nbytes"}, ...]}``
where ``offset`` counts from the start of the payload. Parameters appear in
payload order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSNCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, config: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": "msn-checkpoint",
        "version": FORMAT_VERSION,
        "dtype": "<f4",
        "config": config or {},
        "params": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    """Returns ``(params, header)``; arrays come back as float64."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = memoryview(blob)[16 + hlen:]
    params = {}
    for e in header["params"]:
        if e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4")
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, header


def restore_into(target: dict, params: dict):
    """Copy loaded arrays into a live ``name -> array`` dict in place."""
    missing = set(target) - set(params)
    extra = set(params) - set(target)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, arr in target.items():
        if arr.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {arr.shape}")
        arr[...] = params[name]
