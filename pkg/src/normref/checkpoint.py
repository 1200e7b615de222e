"""Flat binary container of named float64 arrays with a JSON header.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian array bytes at the offsets the header records.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NRMREF\x00\x01"
FORMAT_VERSION = 1
_DTYPE = "<f8"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_DTYPE)
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise DataError(f"{path}: corrupt checkpoint, header truncated")
    try:
        header = json.loads(raw[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header") from None
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    body = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        name, shape = e["name"], tuple(e["shape"])
        if e.get("dtype") != _DTYPE:
            raise DataError(f"{path}: tensor {name} has unsupported dtype {e.get('dtype')}")
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if e["nbytes"] != expected:
            raise DataError(f"{path}: tensor {name} header shape {list(shape)} needs {expected} bytes, "
                            f"header records {e['nbytes']}")
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise DataError(f"{path}: corrupt checkpoint, data for tensor {name} is truncated")
        arrays[name] = np.frombuffer(body[e["offset"]:end], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})
