"""Versioned binary tensor-dict files.

Layout: magic ``SSRF`` + uint16 version + uint32 header length + UTF-8 JSON
header + concatenated raw little-endian buffers. The header lists every
entry's name, dtype, and shape in payload order plus arbitrary JSON metadata,
and round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SSRF"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder not in ("<", "=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint: {e}") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < _PREFIX.size + hlen:
        raise CheckpointError(f"{path}: truncated header payload")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    offset = _PREFIX.size + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("entries", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at entry {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw[offset : offset + nbytes], dtype=dtype
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header.get("meta", {})
