"""Flat binary container for named parameter arrays.

Layout (all integers little-endian uint32, floats little-endian doubles):

    magic  b"CRPN1"
    count  u32
    per tensor: name_len u32, name bytes (utf-8), rank u32,
                dims u32 * rank, values f64 * prod(dims)

Entries are written in sorted name order so identical contents produce
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"CRPN1"


class SnapshotFormatError(ValueError):
    pass


def save_snapshot(path, tensors: dict) -> None:
    """Write named arrays (ndarray or Tensor values) to ``path``."""
    items = []
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.values if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        items.append((name, np.ascontiguousarray(arr, dtype=np.float64)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_snapshot(path) -> dict:
    """Read a snapshot back as {name: float64 ndarray}."""
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise SnapshotFormatError(
            f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    offset = len(MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise SnapshotFormatError(f"{path}: truncated snapshot at byte {offset}")
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_values = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(dims)
    if offset != len(data):
        raise SnapshotFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return out
