"""Binary tensor container used by every persisted model artifact.

Layout (all little-endian): 4-byte magic, uint32 tensor count, then per
tensor a uint32 ndim, ndim uint64 dims, and the row-major float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRT1"


class ContainerError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            arr = np.ascontiguousarray(t, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        end = off + 8 * n
        if end > len(data):
            raise ContainerError(f"{path}: truncated payload at byte {off}")
        arr = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).copy()
        off = end
        out.append(arr)
    return out
