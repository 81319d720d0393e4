"""Binary container for named parameter arrays.

Layout: 4-byte magic, 4-byte little-endian header length, JSON header
(version, array manifest with shapes and dtypes, adapter layer names),
then the raw array data concatenated in manifest order. Parameter
checkpoints store little-endian 32-bit floats; 64-bit storage is available
for artifacts that must round-trip losslessly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .domain import InvalidInputError

MAGIC = b"AVCP"
VERSION = 1

_DTYPES = {"<f4", "<f8"}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    adapter_layers: tuple[str, ...] | list[str] = (),
                    dtype: str = "<f4") -> None:
    if dtype not in _DTYPES:
        raise InvalidInputError(f"dtype must be one of {_DTYPES}, got {dtype!r}")
    names = sorted(arrays)
    header = {
        "version": VERSION,
        "dtype": dtype,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "adapter_layers": sorted(adapter_layers),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays as float64, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {header.get('version')}")
    dtype = np.dtype(header["dtype"])
    offset = 8 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise InvalidInputError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(np.float64)
        offset += nbytes
    return arrays, header
