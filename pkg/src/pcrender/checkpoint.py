"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian u32):

    magic   4 bytes, b"P2PX"
    version u32 (currently 1)
    count   u32
    then per tensor, in written order:
        name_len u32, name utf-8 bytes
        rank u32, dims rank * u32
        data prod(dims) float64 little-endian

Round trips are bit exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "MAGIC", "VERSION"]

MAGIC = b"P2PX"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise CheckpointError(f"file too short to be a checkpoint ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = data.astype(np.float64)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return out
