"""Tensor blob files.

Layout: magic ``HVG3D1``, u8 dtype code (0=f64, 1=f32, 2=u8), u8 ndim,
``ndim`` little-endian u64 dims, then raw little-endian data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HVG3D1"
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_BY_DTYPE = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}


class BlobError(ValueError):
    pass


def to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = _BY_DTYPE.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise BlobError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise BlobError("too many dimensions")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:6] != MAGIC:
        raise BlobError("bad magic; not a tensor blob")
    code, ndim = struct.unpack_from("<BB", buf, 6)
    if code not in _CODES:
        raise BlobError(f"unknown dtype code {code}")
    off = 8 + 8 * ndim
    if len(buf) < off:
        raise BlobError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 8)
    dt = _CODES[code]
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - off != n * dt.itemsize:
        raise BlobError(f"payload is {len(buf) - off} bytes, expected {n * dt.itemsize} for dims {dims}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, arr) -> bytes:
    data = to_bytes(arr)
    Path(path).write_bytes(data)
    return data


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_named(directory, tensors: dict[str, np.ndarray]) -> list[str]:
    """Write one blob per name (``a.b.c`` -> ``a.b.c.blob``); returns file names."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for name in sorted(tensors):
        fn = f"{name}.blob"
        save(d / fn, tensors[name])
        names.append(fn)
    return names


def load_named(directory, prefix: str = "") -> dict[str, np.ndarray]:
    d = Path(directory)
    out = {}
    for f in sorted(d.glob(f"{prefix}*.blob")):
        out[f.name[: -len(".blob")]] = load(f)
    return out
