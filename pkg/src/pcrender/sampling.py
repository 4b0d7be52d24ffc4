"""Per-ray depth sampling: uniform, coarse-to-fine, and point-guided.

All strategies share the same candidate-depth convention: N cell midpoints
between near and far (jittered uniformly within each cell in training mode).
Point-guided sampling marks a candidate valid only when the point cloud has
a neighbor within radius r of the sample position; rays with no valid
candidate fall back to the full uniform set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Ray, RayBundle
from .voxel_index import VoxelIndex, radius_query_batch

__all__ = [
    "SampleSet",
    "ray_near_far",
    "sample_uniform",
    "sample_coarse_to_fine",
    "sample_point_guided",
]


@dataclass
class SampleSet:
    """Depth samples for R rays: depths/deltas/valid are (R, N), positions (R, N, 3)."""

    depths: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray

    @property
    def n(self) -> int:
        return self.depths.shape[1]

    def valid_counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def _as_bundle(ray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ray, RayBundle):
        return ray.origins, ray.directions
    if isinstance(ray, Ray):
        return ray.origin[None, :], ray.direction[None, :]
    raise TypeError(f"expected Ray or RayBundle, got {type(ray).__name__}")


def ray_near_far(
    origins: np.ndarray,
    directions: np.ndarray,
    bounds_lo: np.ndarray,
    bounds_hi: np.ndarray,
    min_near: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray bounding-box entry/exit depths, clamped to [min_near, box diagonal].

    Rays that miss the box get the full clamp range.
    """
    bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
    bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
    diag = float(np.linalg.norm(bounds_hi - bounds_lo))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t_lo = (bounds_lo - origins) * inv
        t_hi = (bounds_hi - origins) * inv
    t1 = np.where(np.isnan(t_lo), -np.inf, np.minimum(t_lo, t_hi))
    t2 = np.where(np.isnan(t_hi), np.inf, np.maximum(t_lo, t_hi))
    near = t1.max(axis=1)
    far = t2.min(axis=1)
    miss = near > far
    near = np.clip(near, min_near, diag)
    far = np.clip(far, min_near, diag)
    near = np.where(miss | (near >= far), min_near, near)
    far = np.where(miss | (near >= far), diag, far)
    return near, far


def _candidate_depths(near, far, n, rays, rng=None):
    """(R, n) midpoint depths, optionally jittered within each cell."""
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (rays,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (rays,)).copy()
    if (near < 0).any():
        raise ValueError("near must be nonnegative")
    if (near >= far).any():
        k = int(np.argmax(near >= far))
        raise ValueError(f"near must be < far (ray {k}: near={near[k]}, far={far[k]})")
    step = (far - near) / n
    if rng is None:
        frac = np.full((rays, n), 0.5)
    else:
        frac = rng.uniform(0.0, 1.0, size=(rays, n))
    z = near[:, None] + (np.arange(n) + frac) * step[:, None]
    return z, step


def _finish(origins, directions, z, step) -> SampleSet:
    deltas = np.empty_like(z)
    deltas[:, :-1] = np.diff(z, axis=1)
    deltas[:, -1] = step  # convention: last delta is the cell width
    positions = origins[:, None, :] + z[:, :, None] * directions[:, None, :]
    valid = np.ones(z.shape, dtype=bool)
    return SampleSet(z, positions, deltas, valid)


def sample_uniform(ray, near, far, n: int, rng: np.random.Generator | None = None) -> SampleSet:
    """N midpoint samples per ray; all valid."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    origins, directions = _as_bundle(ray)
    z, step = _candidate_depths(near, far, n, len(origins), rng)
    return _finish(origins, directions, z, step)


def sample_coarse_to_fine(
    ray,
    near,
    far,
    n: int,
    coarse_weights: np.ndarray,
    rng: np.random.Generator | None = None,
) -> SampleSet:
    """N/2 uniform samples merged with N/2 drawn from the coarse-weight PDF.

    coarse_weights has shape (R, N/2): one nonnegative weight per coarse bin.
    All-zero rows fall back to a uniform PDF.
    """
    if n < 2 or n % 2:
        raise ValueError(f"sample count must be even and >= 2, got {n}")
    origins, directions = _as_bundle(ray)
    rays = len(origins)
    nc = n // 2
    w = np.asarray(coarse_weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.shape != (rays, nc):
        raise ValueError(f"coarse_weights shape {w.shape}, expected {(rays, nc)}")
    if (w < 0).any():
        raise ValueError("coarse weights must be nonnegative")
    z_u, step = _candidate_depths(near, far, nc, rays, rng)
    near_b = np.broadcast_to(np.asarray(near, dtype=np.float64), (rays,))
    far_b = np.broadcast_to(np.asarray(far, dtype=np.float64), (rays,))

    totals = w.sum(axis=1, keepdims=True)
    pdf = np.where(totals > 0, w / np.where(totals > 0, totals, 1.0), 1.0 / nc)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0  # guard against rounding drift
    if rng is None:
        u = np.broadcast_to((np.arange(nc) + 0.5) / nc, (rays, nc)).copy()
    else:
        u = rng.uniform(0.0, 1.0, size=(rays, nc))
    # invert the piecewise-constant CDF: find each draw's bin, then place it
    # proportionally inside that bin's depth interval
    bins = np.empty((rays, nc), dtype=np.int64)
    for i in range(rays):
        bins[i] = np.searchsorted(cdf[i], u[i], side="left")
    bins = np.clip(bins, 0, nc - 1)
    cdf_lo = np.where(bins > 0, np.take_along_axis(cdf, np.maximum(bins - 1, 0), axis=1), 0.0)
    bin_mass = np.take_along_axis(pdf, bins, axis=1)
    frac = np.where(bin_mass > 0, (u - cdf_lo) / np.where(bin_mass > 0, bin_mass, 1.0), 0.5)
    width = (far_b - near_b)[:, None] / nc
    z_f = near_b[:, None] + (bins + frac) * width
    z = np.sort(np.concatenate([z_u, z_f], axis=1), axis=1)
    # strict monotonicity: nudge exact duplicates apart
    for i in range(rays):
        for j in range(1, n):
            if z[i, j] <= z[i, j - 1]:
                z[i, j] = np.nextafter(z[i, j - 1], np.inf)
    return _finish(origins, directions, z, (far_b - near_b) / n)


def sample_point_guided(
    ray,
    index: VoxelIndex,
    r: float,
    near,
    far,
    n: int,
    rng: np.random.Generator | None = None,
) -> SampleSet:
    """Uniform candidates masked by point-cloud proximity.

    Candidate i stays valid iff some cloud point lies within r of its
    position.  Rays with an empty mask revert to all-valid uniform sampling.
    """
    ss = sample_uniform(ray, near, far, n, rng)
    flat = ss.positions.reshape(-1, 3)
    valid, _ = radius_query_batch(index, flat, r)
    valid = valid.reshape(ss.depths.shape)
    none_valid = ~valid.any(axis=1)
    valid[none_valid] = True
    ss.valid = valid
    return ss
