"""Synthetic colored scenes: surface-sampled point clouds, camera rings, and
an analytic ground-truth raycaster for supervision images.

Primitives are colored spheres and axis-aligned boxes.  The raycaster
computes exact ray-primitive intersections, so ground-truth images have no
holes; any holes in rendered output are the renderer's own.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, generate_rays
from .pointcloud import PointCloud

__all__ = [
    "Sphere",
    "Box",
    "RingSpec",
    "SyntheticScene",
    "generate_synthetic_scene",
    "raycast_gt",
    "load_scene",
    "save_scene",
]

_EPS = 1e-9


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    @property
    def centroid(self) -> np.ndarray:
        return self.center


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not (self.hi > self.lo).all():
            raise ValueError("box needs hi > lo componentwise")

    @property
    def area(self) -> float:
        d = self.hi - self.lo
        return 2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class RingSpec:
    """Cameras on a horizontal circle, all aimed at the scene centroid."""

    count: int = 4
    radius: float = 1.2
    height: float = 0.3
    fov_deg: float = 60.0
    width: int = 128
    height_px: int = 128


@dataclass
class SyntheticScene:
    primitives: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    seed: int = 0
    density: float = 20000.0
    ring: RingSpec = field(default_factory=RingSpec)

    def __post_init__(self):
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64).reshape(3)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64).reshape(3)
        for i, p in enumerate(self.primitives):
            if isinstance(p, Sphere):
                lo, hi = p.center - p.radius, p.center + p.radius
            else:
                lo, hi = p.lo, p.hi
            if (lo < self.bounds_lo - _EPS).any() or (hi > self.bounds_hi + _EPS).any():
                raise ValueError(f"primitive {i} extends outside world bounds")
            if p.color.min() < 0 or p.color.max() > 1:
                raise ValueError(f"primitive {i} color outside [0, 1]")

    @property
    def centroid(self) -> np.ndarray:
        if not self.primitives:
            return 0.5 * (self.bounds_lo + self.bounds_hi)
        return np.mean([p.centroid for p in self.primitives], axis=0)


def _sample_sphere(rng: np.random.Generator, s: Sphere, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return s.center + s.radius * v


def _sample_box(rng: np.random.Generator, b: Box, n: int) -> np.ndarray:
    d = b.hi - b.lo
    face_areas = np.array([d[1] * d[2], d[1] * d[2], d[0] * d[2], d[0] * d[2], d[0] * d[1], d[0] * d[1]])
    # largest-remainder apportionment keeps the total exactly n
    quota = face_areas / face_areas.sum() * n
    counts = np.floor(quota).astype(int)
    rema = quota - counts
    for j in np.argsort(-rema)[: n - counts.sum()]:
        counts[j] += 1
    pts = []
    for f, c in enumerate(counts):
        if c == 0:
            continue
        axis = f // 2  # fixed axis of this face
        side = b.hi[axis] if f % 2 else b.lo[axis]
        p = rng.uniform(b.lo, b.hi, size=(c, 3))
        p[:, axis] = side
        pts.append(p)
    return np.vstack(pts) if pts else np.zeros((0, 3))


def _look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation: +z forward to target, +y down in image."""
    z = target - eye
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick another reference
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def ring_cameras(scene: SyntheticScene) -> list[Camera]:
    ring = scene.ring
    target = scene.centroid
    f = (ring.width / 2.0) / np.tan(np.radians(ring.fov_deg) / 2.0)
    cams = []
    for k in range(ring.count):
        ang = 2.0 * np.pi * k / ring.count
        eye = target + np.array([ring.radius * np.cos(ang), ring.radius * np.sin(ang), ring.height])
        rot = _look_at(eye, target)
        cams.append(
            Camera(f, f, ring.width / 2.0, ring.height_px / 2.0, ring.width, ring.height_px, rot, eye)
        )
    return cams


def generate_synthetic_scene(scene: SyntheticScene, density: float | None = None):
    """Surface-sample every primitive at `density` points/m^2.

    Returns (PointCloud, cameras).  Deterministic for a fixed scene seed.
    """
    density = scene.density if density is None else density
    if density <= 0:
        raise ValueError(f"density must be positive, got {density}")
    rng = np.random.default_rng(scene.seed)
    if not scene.primitives:
        warnings.warn("scene has no primitives; returning an empty cloud")
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), ring_cameras(scene)
    pos_parts, col_parts = [], []
    for p in scene.primitives:
        n = int(round(p.area * density))
        if n == 0:
            continue
        pts = _sample_sphere(rng, p, n) if isinstance(p, Sphere) else _sample_box(rng, p, n)
        pos_parts.append(pts)
        col_parts.append(np.tile(p.color, (len(pts), 1)))
    positions = np.vstack(pos_parts) if pos_parts else np.zeros((0, 3))
    colors = np.vstack(col_parts) if col_parts else np.zeros((0, 3))
    return PointCloud(positions, colors), ring_cameras(scene)


def _intersect_sphere(o: np.ndarray, d: np.ndarray, s: Sphere) -> np.ndarray:
    """Smallest positive hit depth per ray; +inf on miss."""
    oc = o - s.center
    b = np.einsum("rj,rj->r", oc, d)
    c = np.einsum("rj,rj->r", oc, oc) - s.radius**2
    disc = b * b - c
    t = np.full(len(o), np.inf)
    hit = disc >= 0.0
    if hit.any():
        sq = np.sqrt(disc[hit])
        t0 = -b[hit] - sq
        t1 = -b[hit] + sq
        tt = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t[hit] = tt
    return t


def _intersect_box(o: np.ndarray, d: np.ndarray, b: Box) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (b.lo - o) * inv
        t_hi = (b.hi - o) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # rays parallel to a slab axis: 0 * inf gives NaN; such axes impose no bound
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_near = t1.max(axis=1)
    t_far = t2.min(axis=1)
    t = np.full(len(o), np.inf)
    ok = t_near <= t_far
    # outside the box: surface at t_near; inside: exit face at t_far
    t = np.where(ok & (t_near > _EPS), t_near, t)
    t = np.where(ok & (t_near <= _EPS) & (t_far > _EPS), t_far, t)
    return t


def raycast_gt(scene: SyntheticScene, camera: Camera) -> np.ndarray:
    """Exact nearest-hit image (H, W, 3); black background."""
    bundle = generate_rays(camera, (camera.height, camera.width))
    o, d = bundle.origins, bundle.directions
    best_t = np.full(len(o), np.inf)
    img = np.zeros((len(o), 3))
    for p in scene.primitives:
        t = _intersect_sphere(o, d, p) if isinstance(p, Sphere) else _intersect_box(o, d, p)
        closer = t < best_t
        img[closer] = p.color
        best_t = np.where(closer, t, best_t)
    return img.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# scene spec files: one key-value record per line


def save_scene(path: str | Path, scene: SyntheticScene) -> None:
    lines = [
        f"seed {scene.seed}",
        f"density {scene.density!r}",
        "bounds " + " ".join(repr(float(x)) for x in np.concatenate([scene.bounds_lo, scene.bounds_hi])),
        f"ring {scene.ring.count} {scene.ring.radius!r} {scene.ring.height!r} "
        f"{scene.ring.fov_deg!r} {scene.ring.width} {scene.ring.height_px}",
    ]
    for p in scene.primitives:
        if isinstance(p, Sphere):
            nums = list(p.center) + [p.radius] + list(p.color)
            lines.append("sphere " + " ".join(repr(float(x)) for x in nums))
        else:
            nums = list(p.lo) + list(p.hi) + list(p.color)
            lines.append("box " + " ".join(repr(float(x)) for x in nums))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path: str | Path) -> SyntheticScene:
    seed, density = 0, 20000.0
    bounds_lo = np.array([-2.0, -2.0, -2.0])
    bounds_hi = np.array([2.0, 2.0, 2.0])
    ring = RingSpec()
    prims: list = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        try:
            if key == "seed":
                seed = int(vals[0])
            elif key == "density":
                density = float(vals[0])
            elif key == "bounds":
                nums = [float(v) for v in vals]
                bounds_lo, bounds_hi = np.array(nums[:3]), np.array(nums[3:6])
            elif key == "ring":
                ring = RingSpec(int(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]), int(vals[4]), int(vals[5]))
            elif key == "sphere":
                nums = [float(v) for v in vals]
                prims.append(Sphere(nums[:3], nums[3], nums[4:7]))
            elif key == "box":
                nums = [float(v) for v in vals]
                prims.append(Box(nums[:3], nums[3:6], nums[6:9]))
            else:
                raise ValueError(f"unknown record {key!r}")
        except (IndexError, ValueError) as e:
            raise ValueError(f"scene file {path}, line {ln}: {e}") from None
    return SyntheticScene(prims, bounds_lo, bounds_hi, seed, density, ring)
