"""Flat binary container for waveforms, IQ dumps and spectrograms.

Layout: 8-byte magic, uint32 dtype code, uint32 rank (16 bytes total), then
``rank`` little-endian int64 dimension sizes, then row-major little-endian
samples. Complex samples are stored as interleaved (re, im) pairs.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, ShapeDirectoryMismatch

MAGIC = b"RASRFLAT"
_HEADER = struct.Struct("<8sII")
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<c8"),
    4: np.dtype("<c16"),
    5: np.dtype("<i8"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODE_OF:
        raise TypeError(f"unsupported dtype {array.dtype}")
    head = _HEADER.pack(MAGIC, _CODE_OF[dtype], array.ndim)
    dims = struct.pack(f"<{array.ndim}q", *array.shape)
    return head + dims + np.ascontiguousarray(array, dtype=dtype).tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise CorruptHeader("container shorter than its header")
    magic, code, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC or code not in DTYPE_CODES:
        raise CorruptHeader("bad magic or dtype code")
    end = _HEADER.size + 8 * rank
    if len(blob) < end:
        raise CorruptHeader("truncated dimension list")
    shape = struct.unpack_from(f"<{rank}q", blob, _HEADER.size)
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - end != count * dtype.itemsize:
        raise ShapeDirectoryMismatch(f"payload holds {len(blob) - end} bytes, shape {shape} needs {count * dtype.itemsize}")
    return np.frombuffer(blob, dtype=dtype, offset=end, count=count).reshape(shape).copy()


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
