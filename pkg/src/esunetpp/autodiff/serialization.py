"""TSR1 binary tensor files.

Layout: ``b"TSR1"``, one dtype byte (1 = float32, 2 = float64), one rank byte,
``rank`` little-endian uint64 extents, then little-endian row-major values.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError

MAGIC = b"TSR1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

PathLike = Union[str, os.PathLike]


def encode_tsr(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _BY_DTYPE:
        array = array.astype(np.float64)
    code = _BY_DTYPE[array.dtype]
    if array.ndim > 255:
        raise FormatError("TSR1 supports rank <= 255")
    header = MAGIC + struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes()


def decode_tsr(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not a TSR1 file (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise FormatError(f"unknown TSR1 dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated TSR1 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = _CODES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + count * dtype.itemsize:
        raise FormatError(f"TSR1 payload has {len(buf) - off} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save_tsr(path: PathLike, array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tsr(array))


def load_tsr(path: PathLike) -> np.ndarray:
    return decode_tsr(Path(path).read_bytes())
