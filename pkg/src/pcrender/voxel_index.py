"""Uniform-grid spatial hash for nearest-neighbor queries inside a fixed radius.

The cell size must be at least the query radius so that the 27-cell
neighborhood around a query provably contains every point within the ball.
Queries reproduce an exhaustive linear scan exactly: the same elementwise
squared-distance arithmetic is used, and ties pick the lowest point index.
"""

from __future__ import annotations

import numpy as np

from .pointcloud import PointCloud

__all__ = ["VoxelIndex", "build_voxel_index", "radius_query", "radius_query_batch", "brute_force_nn"]

_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


class VoxelIndex:
    """Immutable after build; safe for concurrent readers.

    ``cells`` maps integer cell coordinates to ascending point-index arrays.
    """

    def __init__(self, cloud: PointCloud, cell: float):
        if cell <= 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        if not np.isfinite(cloud.positions).all():
            bad = int(np.argwhere(~np.isfinite(cloud.positions).all(axis=1))[0, 0])
            raise ValueError(f"non-finite position at index {bad}")
        self.cell = float(cell)
        self.cloud = cloud
        coords = np.floor(cloud.positions / self.cell).astype(np.int64)
        self._coords = coords
        if len(coords):
            self._min_c = coords.min(axis=0)
            self._dims = coords.max(axis=0) - self._min_c + 1
        else:
            self._min_c = np.zeros(3, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
        linear = self._linearize(coords)
        # stable sort keeps indices ascending within each cell
        self._order = np.argsort(linear, kind="stable")
        sorted_lin = linear[self._order]
        uniq, starts = np.unique(sorted_lin, return_index=True)
        counts = np.diff(np.append(starts, len(sorted_lin)))
        # dense linear-cell -> slot lookup; -1 marks empty cells
        self._lookup = np.full(int(self._dims.prod()), -1, dtype=np.int64)
        self._lookup[uniq] = np.arange(len(uniq))
        self._starts = starts
        self._counts = counts
        self.cells = {
            tuple(coords[self._order[s]]): self._order[s : s + c]
            for s, c in zip(starts, counts)
        }

    def _linearize(self, coords: np.ndarray) -> np.ndarray:
        rel = coords - self._min_c
        return (rel[..., 0] * self._dims[1] + rel[..., 1]) * self._dims[2] + rel[..., 2]

    def _candidate_slots(self, qcells: np.ndarray) -> np.ndarray:
        """Slot ids (or -1) of the 27 neighbor cells per query: (Q, 27)."""
        neigh = qcells[:, None, :] + _OFFSETS[None, :, :]
        rel = neigh - self._min_c
        inside = ((rel >= 0) & (rel < self._dims)).all(axis=2)
        lin = (rel[..., 0] * self._dims[1] + rel[..., 1]) * self._dims[2] + rel[..., 2]
        slots = np.full(lin.shape, -1, dtype=np.int64)
        if inside.any():
            slots[inside] = self._lookup[lin[inside]]
        return slots


def build_voxel_index(cloud: PointCloud, cell: float) -> VoxelIndex:
    return VoxelIndex(cloud, cell)


def brute_force_nn(positions: np.ndarray, queries: np.ndarray, r: float):
    """Exhaustive-scan oracle: (valid flags, nearest indices; -1 when invalid)."""
    queries = np.atleast_2d(queries)
    q = len(queries)
    valid = np.zeros(q, dtype=bool)
    nearest = np.full(q, -1, dtype=np.int64)
    if len(positions) == 0:
        return valid, nearest
    r2 = r * r
    for i, x in enumerate(queries):
        d2 = ((positions - x) ** 2).sum(axis=1)
        j = int(np.argmin(d2))  # first occurrence = lowest index on ties
        if d2[j] <= r2:
            valid[i] = True
            nearest[i] = j
    return valid, nearest


def radius_query_batch(index: VoxelIndex, queries: np.ndarray, r: float):
    """Vectorized query: (valid flags (Q,), nearest indices (Q,); -1 if none).

    valid[i] iff some point lies within r of queries[i]; nearest[i] attains
    the minimum distance, lowest index on exact ties.
    """
    if r > index.cell:
        raise ValueError(
            f"radius {r} exceeds cell size {index.cell}; rebuild the index with cell >= r"
        )
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    nq = len(queries)
    valid = np.zeros(nq, dtype=bool)
    nearest = np.full(nq, -1, dtype=np.int64)
    if len(index.cloud) == 0 or nq == 0:
        return valid, nearest
    qcells = np.floor(queries / index.cell).astype(np.int64)
    slots = index._candidate_slots(qcells)  # (Q, 27)
    present = slots >= 0
    if not present.any():
        return valid, nearest
    flat_slots = slots[present]
    lens = index._counts[flat_slots]
    starts = index._starts[flat_slots]
    qids = np.nonzero(present)[0]  # row (query) index of each present neighbor cell
    total = int(lens.sum())
    if total == 0:
        return valid, nearest
    ends = np.cumsum(lens)
    begins = ends - lens
    span = np.arange(total, dtype=np.int64) - np.repeat(begins, lens) + np.repeat(starts, lens)
    cand = index._order[span]
    cand_q = np.repeat(qids, lens)
    # identical arithmetic to the exhaustive scan: per-component square, sum
    d2 = ((index.cloud.positions[cand] - queries[cand_q]) ** 2).sum(axis=1)
    # per query: smallest d2, then lowest point index
    sel = np.lexsort((cand, d2, cand_q))
    first = np.unique(cand_q[sel], return_index=True)
    r2 = r * r
    best_rows = sel[first[1]]
    ok = d2[best_rows] <= r2
    hit_q = first[0][ok]
    valid[hit_q] = True
    nearest[hit_q] = cand[best_rows[ok]]
    return valid, nearest


def radius_query(index: VoxelIndex, x: np.ndarray, r: float):
    """Single-point query: (valid, nearest index or None)."""
    valid, nearest = radius_query_batch(index, np.asarray(x, dtype=np.float64)[None, :], r)
    return bool(valid[0]), (int(nearest[0]) if valid[0] else None)
