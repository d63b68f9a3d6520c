"""Single-file array format: magic, JSON header, raw little-endian buffer.

Byte layout:
    bytes 0..3    magic b"NDA1"
    bytes 4..7    uint32 little-endian header length L
    bytes 8..8+L  UTF-8 JSON {"dtype": "float64"|"float32", "shape": [...]}
    remainder     C-order element buffer, little-endian

Round-trips are bit-exact, independent of host endianness.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"NDA1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ValueError(f"save_array: unsupported dtype {arr.dtype}")
    header = json.dumps({"dtype": name, "shape": list(arr.shape)}).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"load_array: {path} is not an array file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    data = np.frombuffer(raw[8 + hlen :], dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"load_array: {path} payload does not match shape {shape}")
    return data.reshape(shape).astype(header["dtype"], copy=True)
