"""Pinhole cameras and ray generation.

Convention, fixed once: right-handed camera frame with +x right, +y down,
+z forward; image origin at the top-left pixel corner.  The pose maps
camera coordinates to world coordinates.  The ray grid may be coarser than
the image; rays pass through grid-cell centers measured in image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Camera", "Ray", "RayBundle", "generate_rays", "ray_point", "load_cameras", "save_cameras"]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3, camera-to-world
    translation: np.ndarray  # 3-vector, camera center in world

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        rtr = self.rotation.T @ self.rotation
        if np.abs(rtr - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    pixel: tuple[float, float]  # (u, v) in image pixels


class RayBundle:
    """Rays over an H_r x W_r grid, stored as flat (R, 3) arrays (row-major)."""

    def __init__(self, origins: np.ndarray, directions: np.ndarray, pixels: np.ndarray, grid: tuple[int, int]):
        self.origins = origins
        self.directions = directions
        self.pixels = pixels
        self.grid = grid

    def __len__(self) -> int:
        return len(self.origins)

    def ray(self, k: int) -> Ray:
        return Ray(self.origins[k], self.directions[k], (float(self.pixels[k, 0]), float(self.pixels[k, 1])))


def generate_rays(camera: Camera, grid: tuple[int, int]) -> RayBundle:
    """One ray per grid cell, through the cell center in image pixels."""
    hr, wr = grid
    if hr < 1 or wr < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid}")
    if camera.fx <= 0 or camera.fy <= 0 or camera.width <= 0 or camera.height <= 0:
        raise ValueError("degenerate intrinsics")
    sx = camera.width / wr
    sy = camera.height / hr
    u = (np.arange(wr) + 0.5) * sx
    v = (np.arange(hr) + 0.5) * sy
    uu, vv = np.meshgrid(u, v)  # row-major: v varies over rows
    d_cam = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.translation, d_world.shape).copy()
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    return RayBundle(origins, d_world, pixels, (hr, wr))


def ray_point(ray: Ray, z: float) -> np.ndarray:
    """Point at depth z along the ray: o + z*d."""
    if z < 0:
        raise ValueError(f"depth must be nonnegative, got {z}")
    return ray.origin + z * ray.direction


def save_cameras(path: str | Path, cameras: list[Camera]) -> None:
    """One block per camera: 'fx fy cx cy w h' then the 3x4 pose row-major."""
    lines = []
    for c in cameras:
        lines.append(f"{c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r} {c.width} {c.height}")
        pose = np.hstack([c.rotation, c.translation[:, None]])
        for row in pose:
            lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path: str | Path) -> list[Camera]:
    tokens = Path(path).read_text().split()
    if len(tokens) % 18 != 0:
        raise ValueError(f"camera file holds {len(tokens)} numbers, not a multiple of 18")
    cameras = []
    for i in range(0, len(tokens), 18):
        fx, fy, cx, cy = (float(t) for t in tokens[i : i + 4])
        w, h = int(float(tokens[i + 4])), int(float(tokens[i + 5]))
        pose = np.array([float(t) for t in tokens[i + 6 : i + 18]]).reshape(3, 4)
        cameras.append(Camera(fx, fy, cx, cy, w, h, pose[:, :3], pose[:, 3]))
    return cameras
