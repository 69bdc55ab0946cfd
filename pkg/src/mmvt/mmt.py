"""Reader/writer for the ``.mmt`` tensor container.

Layout: ``MMT1`` | u8 dtype code (0=f32, 1=f64) | u8 ndim | ndim x u64 LE dims |
raw little-endian values in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"MMT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def write(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_OF:
        raise FormatError(f"unsupported dtype {arr.dtype}; .mmt stores float32/float64")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    code = _CODE_OF[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def read(fh: BinaryIO) -> np.ndarray:
    head = fh.read(6)
    if len(head) < 6:
        raise FormatError("truncated .mmt header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    code, ndim = head[4], head[5]
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    if ndim == 0:
        raise FormatError("ndim must be positive")
    raw = fh.read(8 * ndim)
    if len(raw) < 8 * ndim:
        raise FormatError("truncated .mmt dims")
    dims = struct.unpack(f"<{ndim}Q", raw)
    if any(d == 0 for d in dims):
        raise FormatError(f"dims must be positive, got {list(dims)}")
    dt = _CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    body = fh.read(nbytes)
    if len(body) < nbytes:
        raise FormatError(f"truncated .mmt payload: {len(body)} of {nbytes} bytes")
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write(buf, arr)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after .mmt payload")
    return arr


def save(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write(fh, arr)


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after .mmt payload")
    return arr
