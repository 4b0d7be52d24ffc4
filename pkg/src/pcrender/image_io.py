"""Image file IO: PNG via Pillow and binary PPM written by hand.

All in-memory images are float64 (H, W, 3) in [0, 1]; files hold 8-bit
channels quantized by round-half-to-even, so saving the same array twice
produces byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["to_uint8", "from_uint8", "save_png", "load_png", "save_ppm", "load_ppm", "save_image"]


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def save_png(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_ppm(path: str | Path, img: np.ndarray) -> None:
    data = to_uint8(img)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    # header: magic, width, height, maxval, then a single whitespace byte
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PPM header in {path}")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    need = w * h * 3
    body = blob[pos : pos + need]
    if len(body) != need:
        raise ValueError(f"PPM body has {len(body)} bytes, expected {need}")
    return from_uint8(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Dispatch on suffix: .png or .ppm."""
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        save_png(path, img)
    elif suffix == ".ppm":
        save_ppm(path, img)
    else:
        raise ValueError(f"unsupported image format {suffix!r} (use .png or .ppm)")
