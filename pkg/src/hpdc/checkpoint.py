"""Checkpoint archive: named tensors + JSON metadata in one binary file.

Layout (all little-endian):
    magic "HPCK" | u16 version | u32 meta_len | meta JSON (utf-8)
    u32 tensor_count
    per tensor: u16 name_len | name utf-8 | u8 dtype | u8 ndim |
                u32 dim[ndim] | raw values

dtype codes: 0 = float32, 1 = float64, 2 = int32, 3 = int64.
The metadata JSON carries the model config and scalar training state
(step, lr). Streams reference checkpoints by the SHA-256 of the whole file.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"HPCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
          np.dtype("int32"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict) -> bytes:
    """Write the archive; returns its SHA-256 digest."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    data = bytes(blob)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).digest()


def load_checkpoint(path):
    """Read the archive; returns (arrays, meta, sha256 digest)."""
    with open(path, "rb") as fh:
        data = fh.read()
    digest = hashlib.sha256(data).digest()
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 6
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize if ndim else dt.itemsize
        arr = np.frombuffer(data[off : off + nbytes], dtype=dt).reshape(shape)
        off += nbytes
        arrays[name] = arr.copy()
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return arrays, meta, digest


def file_sha256(path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()
