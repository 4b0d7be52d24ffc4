"""Colored point clouds and PLY file I/O.

Supported PLY dialects: ``ascii 1.0`` and ``binary_little_endian 1.0`` with
exactly the vertex properties x, y, z (float or double) and red, green, blue
(uchar).  Writes use double positions so a save/load round trip preserves
them bit exactly; colors quantize to 8 bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["PointCloud", "PlyError", "load_ply", "save_ply"]


@dataclass
class PointCloud:
    """positions in meters (K, 3); colors in [0, 1] (K, 3)."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError(
                f"{len(self.positions)} positions but {len(self.colors)} colors"
            )
        if not np.isfinite(self.positions).all():
            bad = int(np.argwhere(~np.isfinite(self.positions).all(axis=1))[0, 0])
            raise ValueError(f"non-finite position at index {bad}")
        if len(self.colors) and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)


class PlyError(Exception):
    """Malformed PLY content; message includes the byte offset."""


_COORD_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
_COLOR_TYPES = {"uchar", "uint8"}
_COORD_NAMES = ("x", "y", "z")
_COLOR_NAMES = ("red", "green", "blue")


def save_ply(cloud: PointCloud, path: str | Path, binary: bool = True) -> None:
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            for p, c in zip(cloud.positions, rgb):
                fh.write(struct.pack("<3d", *p) + struct.pack("3B", *c))
        else:
            for p, c in zip(cloud.positions, rgb):
                # repr gives the shortest digits that parse back bit-exactly
                line = (
                    f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                    f"{c[0]} {c[1]} {c[2]}\n"
                )
                fh.write(line.encode("ascii"))


def _parse_header(buf: bytes):
    """Returns (fmt, count, properties, payload offset)."""
    if buf[:4] not in (b"ply\n", b"ply\r"):
        raise PlyError("not a PLY file (bad magic at byte 0)")
    end = buf.find(b"end_header\n")
    if end < 0:
        raise PlyError(f"missing end_header (scanned {len(buf)} bytes)")
    offset = end + len(b"end_header\n")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    pos = 4
    for raw in buf[4:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        line_at = pos
        pos += len(raw) + 1
        if not line or line.startswith("comment"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian") or tok[2] != "1.0":
                raise PlyError(f"unsupported format line at byte {line_at}: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise PlyError(f"unsupported element at byte {line_at}: {line!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            if len(tok) != 3:
                raise PlyError(f"malformed property at byte {line_at}: {line!r}")
            props.append((tok[1], tok[2]))
        else:
            raise PlyError(f"unrecognized header line at byte {line_at}: {line!r}")
    if fmt is None or count is None:
        raise PlyError("header lacks format or element vertex line (byte 4)")
    names = tuple(n for _, n in props)
    if names != _COORD_NAMES + _COLOR_NAMES:
        raise PlyError(f"expected properties x,y,z,red,green,blue; got {names} (header ends at byte {end})")
    for ptype, name in props[:3]:
        if ptype not in _COORD_TYPES:
            raise PlyError(f"unsupported coordinate type {ptype!r} for {name} (header ends at byte {end})")
    for ptype, name in props[3:]:
        if ptype not in _COLOR_TYPES:
            raise PlyError(f"unsupported color type {ptype!r} for {name} (header ends at byte {end})")
    coord_dtypes = [_COORD_TYPES[p] for p, _ in props[:3]]
    if len(set(coord_dtypes)) != 1:
        raise PlyError("mixed coordinate precisions are unsupported")
    return fmt, count, coord_dtypes[0], offset


def load_ply(path: str | Path) -> PointCloud:
    buf = Path(path).read_bytes()
    fmt, count, coord_dtype, off = _parse_header(buf)
    if fmt == "binary_little_endian":
        csize = np.dtype(coord_dtype).itemsize
        row = 3 * csize + 3
        need = count * row
        if len(buf) - off < need:
            raise PlyError(f"payload truncated at byte {len(buf)}: need {need} bytes from byte {off}")
        rec = np.dtype([("p", coord_dtype, 3), ("c", "u1", 3)])
        data = np.frombuffer(buf, dtype=rec, count=count, offset=off)
        pos = data["p"].astype(np.float64)
        col = data["c"].astype(np.float64) / 255.0
    else:
        text = buf[off:].decode("ascii", errors="replace")
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if len(lines) < count:
            raise PlyError(f"payload truncated at byte {len(buf)}: {len(lines)} rows, expected {count}")
        pos = np.empty((count, 3), dtype=np.float64)
        col = np.empty((count, 3), dtype=np.float64)
        cursor = off
        for i in range(count):
            tok = lines[i].split()
            if len(tok) != 6:
                raise PlyError(f"malformed vertex row {i} near byte {cursor}: {lines[i]!r}")
            try:
                pos[i] = [float(t) for t in tok[:3]]
                col[i] = [int(t) / 255.0 for t in tok[3:]]
            except ValueError as e:
                raise PlyError(f"unparseable vertex row {i} near byte {cursor}: {e}") from None
            cursor += len(lines[i]) + 1
    return PointCloud(pos, np.clip(col, 0.0, 1.0))
