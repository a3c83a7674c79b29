"""Weight snapshot files.

Layout (little endian): magic ``DNW1``, then one record per tensor until
EOF: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, fp64 payload
in row-major order. Records keep the caller's (model-definition) order.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DNW1"

__all__ = ["save_snapshot", "load_snapshot", "snapshot_bytes"]


def snapshot_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_snapshot(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(snapshot_bytes(tensors))


def load_snapshot(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a DNW1 snapshot")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated snapshot") from exc
    return out
