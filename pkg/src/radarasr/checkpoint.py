"""Checkpoint files: a text header followed by raw little-endian float32 data.

Layout::

    RADARASR-CHECKPOINT 1
    [config]
    key=value
    ...
    [tensors]
    name<TAB>shape (comma separated)<TAB>offset<TAB>count
    ...
    [end]
    <payload>

Offsets and counts are in elements, relative to the start of the payload.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CorruptHeader, ShapeDirectoryMismatch
from .numcore import Tensor

MAGIC = "RADARASR-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f4")


def to_bytes(weights: dict, config: dict[str, str]) -> bytes:
    lines = [f"{MAGIC} {VERSION}", "[config]"]
    for key, value in config.items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"config entry {key!r} cannot be serialised")
        lines.append(f"{key}={value}")
    lines.append("[tensors]")
    chunks, offset = [], 0
    for name, t in weights.items():
        arr = np.ascontiguousarray(np.asarray(t.data if isinstance(t, Tensor) else t), dtype=_DTYPE)
        shape = ",".join(map(str, arr.shape))
        lines.append(f"{name}\t{shape}\t{offset}\t{arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.size
    lines.append("[end]")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[dict, dict[str, str]]:
    marker = b"\n[end]\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CorruptHeader("missing checkpoint magic or header terminator")
    try:
        header = blob[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptHeader("header is not valid text") from exc
    payload = blob[cut + len(marker):]
    if header[0] != f"{MAGIC} {VERSION}":
        raise CorruptHeader(f"unsupported header line {header[0]!r}")
    if "[config]" not in header or "[tensors]" not in header:
        raise CorruptHeader("missing header section")
    split = header.index("[tensors]")
    config = {}
    for line in header[header.index("[config]") + 1:split]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptHeader(f"bad config line {line!r}")
        config[key] = value
    directory = []
    for line in header[split + 1:]:
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorruptHeader(f"bad tensor line {line!r}")
        try:
            shape = tuple(int(s) for s in parts[1].split(",") if s)
            offset, count = int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise CorruptHeader(f"bad tensor line {line!r}") from exc
        directory.append((parts[0], shape, offset, count))

    total = sum(count for *_, count in directory)
    if len(payload) != total * _DTYPE.itemsize:
        raise ShapeDirectoryMismatch(f"payload holds {len(payload)} bytes, directory needs {total * 4}")
    data = np.frombuffer(payload, dtype=_DTYPE)
    weights = {}
    for name, shape, offset, count in directory:
        if int(np.prod(shape, dtype=np.int64)) != count or offset + count > total:
            raise ShapeDirectoryMismatch(f"tensor {name}: shape {shape} vs count {count}")
        arr = data[offset:offset + count].reshape(shape).astype(np.float32)
        weights[name] = Tensor(arr, requires_grad=True, dtype=np.float32)
    return weights, config


def save(path, weights: dict, config: dict[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(weights, config))
    return path


def load(path) -> tuple[dict, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        from .errors import MissingPrerequisite
        raise MissingPrerequisite(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes())
