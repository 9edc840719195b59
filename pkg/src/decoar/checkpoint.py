"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DCOARCKP"
    version    uint32    currently 1
    count      uint32    number of entries
    entry * count:
        path_len  uint16
        path      path_len bytes, UTF-8
        ndim      uint8
        dims      ndim * uint64
        payload   prod(dims) * float64 (little-endian, row-major)

Entries are written in sorted path order, so equal contents give equal bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DCOARCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for path in sorted(arrays):
        arr = np.ascontiguousarray(arrays[path], dtype="<f8")
        key = path.encode("utf-8")
        if len(key) > 0xFFFF:
            raise CheckpointError(f"parameter path too long: {path[:40]}...")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            path = blob[pos : pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            payload = blob[pos : pos + 8 * n]
            if len(payload) != 8 * n:
                raise CheckpointError(f"truncated payload for {path!r}")
            out[path] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
