"""Binary checkpoint format.

Layout: the magic ``TREARCKPT1``, then a u64 entry count, then per entry a u64
name length, the utf-8 name, a u64 rank, ``rank`` u64 extents and the float64
payload. All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TREARCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = read("<Q")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = read("<Q")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<Q")
        shape = read(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: payload of {name!r} truncated")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
