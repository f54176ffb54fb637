"""Self-describing binary container for model and dataset checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, little-endian
uint64 header length, UTF-8 JSON header, then the named arrays as raw
little-endian float64 blobs concatenated in header order.  Round-trips
are bit-exact (float64 <-> bytes is lossless).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"RIEMCKPT"
VERSION = 1


def save_blob(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a named-array container with a model-kind header."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_blob(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a container back; inverse of save_blob."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[entry["name"]] = (
                np.frombuffer(buf, dtype="<f8", count=count).reshape(shape).copy()
            )
    return header["kind"], header["meta"], arrays
