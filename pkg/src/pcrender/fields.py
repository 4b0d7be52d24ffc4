"""Multi-scale sparse feature fields over a voxelized point cloud.

A point cloud is voxelized at the base cell size into a stride-1 sparse
volume (features: mean color + occupancy).  A sparse 3-level UNet encoder
produces a feature-volume pyramid at strides 8, 4, 2, 1 with 16 channels per
scale.  Samples query the pyramid by trilinear interpolation (absent voxels
contribute a zero vector) and per-scale MLP heads map interpolated features
to density, a render feature, and (finest scale) color.

Sparse convolutions run over precomputed per-offset index pairs so the
per-step cost is gathers and small matmuls.  Downsampling keeps the
floor-divided support; transposed upsampling is generative, growing each
voxel into its 8 children, which is what lets the renderer fill holes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pointcloud import PointCloud
from .tensor import Tensor

__all__ = [
    "SparseVolume",
    "FeatureVolumePyramid",
    "MultiScaleFields",
    "voxelize",
    "trilinear_setup",
    "query_feature",
    "head_eval",
    "densify",
    "STRIDES",
    "FEATURE_CHANNELS",
]

STRIDES = (8, 4, 2, 1)  # coarse to fine
FEATURE_CHANNELS = 16
_KERNEL_3 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)
_KERNEL_2 = np.array(
    [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)


@dataclass
class SparseVolume:
    """Occupied voxels at one stride; coords are in stride units (unique rows)."""

    stride: int
    coords: np.ndarray  # (V, 3) int64
    feats: Tensor  # (V, C)
    cell: float  # base cell size in meters

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.value.shape[1]

    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * (self.stride * self.cell)


@dataclass
class FeatureVolumePyramid:
    """Scales ordered coarse to fine: strides 8, 4, 2, 1."""

    volumes: list[SparseVolume]

    def __post_init__(self):
        strides = [v.stride for v in self.volumes]
        if strides != sorted(strides, reverse=True):
            raise ValueError(f"strides must strictly decrease, got {strides}")


class _CoordSet:
    """Sorted linearized coordinates with vectorized membership lookup."""

    def __init__(self, coords: np.ndarray):
        self.coords = coords
        if len(coords):
            self._lo = coords.min(axis=0) - 1
            self._dims = coords.max(axis=0) - self._lo + 3
        else:
            self._lo = np.zeros(3, dtype=np.int64)
            self._dims = np.ones(3, dtype=np.int64)
        lin = self._linearize(coords)
        self._order = np.argsort(lin, kind="stable")
        self._sorted = lin[self._order]

    def _linearize(self, c: np.ndarray) -> np.ndarray:
        rel = c - self._lo
        return (rel[..., 0] * self._dims[1] + rel[..., 1]) * self._dims[2] + rel[..., 2]

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Index of each query coord, or -1 if absent."""
        if len(self.coords) == 0 or len(queries) == 0:
            return np.full(len(queries), -1, dtype=np.int64)
        inside = ((queries > self._lo) & (queries < self._lo + self._dims - 1)).all(axis=1)
        out = np.full(len(queries), -1, dtype=np.int64)
        if inside.any():
            q = self._linearize(queries[inside])
            pos = np.searchsorted(self._sorted, q)
            pos = np.clip(pos, 0, len(self._sorted) - 1)
            hit = self._sorted[pos] == q
            found = np.where(hit, self._order[pos], -1)
            out[inside] = found
        return out


def voxelize(cloud: PointCloud, cell: float) -> SparseVolume:
    """Stride-1 volume; per-voxel feature = (mean r, g, b, occupancy 1.0)."""
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    if len(cloud) == 0:
        return SparseVolume(1, np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, 4))), cell)
    base = np.floor(cloud.positions / cell).astype(np.int64)
    coords, inverse = np.unique(base, axis=0, return_inverse=True)
    feats = np.zeros((len(coords), 4))
    np.add.at(feats[:, :3], inverse, cloud.colors)
    counts = np.bincount(inverse, minlength=len(coords)).astype(np.float64)
    feats[:, :3] /= counts[:, None]
    feats[:, 3] = 1.0
    return SparseVolume(1, coords, Tensor(feats), cell)


# ---------------------------------------------------------------------------
# kernel maps: per-offset (input index, output index) pairs


def _subm_pairs(coords: np.ndarray, cset: _CoordSet):
    """3^3 submanifold conv: output support = input support."""
    pairs = []
    for off in _KERNEL_3:
        src = cset.lookup(coords + off)
        out_idx = np.nonzero(src >= 0)[0].astype(np.int64)
        pairs.append((src[out_idx], out_idx))
    return pairs


def _down_pairs(in_coords: np.ndarray):
    """Stride-2 3^3 conv; output support = floor(input / 2)."""
    out_coords = np.unique(in_coords >> 1, axis=0)
    in_set = _CoordSet(in_coords)
    pairs = []
    for off in _KERNEL_3:
        src = in_set.lookup((out_coords << 1) + off)
        out_idx = np.nonzero(src >= 0)[0].astype(np.int64)
        pairs.append((src[out_idx], out_idx))
    return out_coords, pairs


def _up_pairs(in_coords: np.ndarray):
    """Generative transposed stride-2 conv: children 2c + {0,1}^3."""
    n = len(in_coords)
    children = (in_coords[:, None, :] * 2 + _KERNEL_2[None, :, :]).reshape(-1, 3)
    out_coords = np.unique(children, axis=0)
    out_set = _CoordSet(out_coords)
    pairs = []
    for k, off in enumerate(_KERNEL_2):
        dst = out_set.lookup(in_coords * 2 + off)
        pairs.append((np.arange(n, dtype=np.int64), dst))
    return out_coords, pairs


# ---------------------------------------------------------------------------
# encoder


def _he(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _ConvSpec:
    """Layer shapes for one sparse conv; weight is (K, Cin, Cout)."""

    def __init__(self, name: str, kind: str, cin: int, cout: int):
        self.name, self.kind, self.cin, self.cout = name, kind, cin, cout

    @property
    def k(self) -> int:
        return 27 if self.kind in ("subm", "down") else 8


# encoder wiring: stem at stride 1, three downs to stride 8, three generative
# ups back to stride 1 with projected skip connections; taps feed the pyramid
_ENCODER_LAYERS = [
    _ConvSpec("stem", "subm", 4, 16),
    _ConvSpec("down1", "down", 16, 32),
    _ConvSpec("mid2", "subm", 32, 32),
    _ConvSpec("down2", "down", 32, 64),
    _ConvSpec("mid4", "subm", 64, 64),
    _ConvSpec("down3", "down", 64, 64),
    _ConvSpec("mid8", "subm", 64, 64),
    _ConvSpec("up3", "up", 64, 32),
    _ConvSpec("dec4", "subm", 32, 32),
    _ConvSpec("up2", "up", 32, 16),
    _ConvSpec("dec2", "subm", 16, 16),
    _ConvSpec("up1", "up", 16, 16),
    _ConvSpec("dec1", "subm", 16, 16),
]
# 1x1 projections: skips onto decoder channel widths, taps onto C_l
_PROJECTIONS = [
    ("skip4", 64, 32),  # stride-4 skip into up3 output
    ("skip2", 32, 16),  # stride-2 skip into up2 output
    ("skip1", 16, 16),  # stride-1 skip into up1 output
    ("tap8", 64, FEATURE_CHANNELS),
    ("tap4", 32, FEATURE_CHANNELS),
    ("tap2", 16, FEATURE_CHANNELS),
    ("tap1", 16, FEATURE_CHANNELS),
]


def init_encoder_params(rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for spec in _ENCODER_LAYERS:
        fan_in = spec.k * spec.cin
        params[f"enc.{spec.name}.w"] = Tensor(_he(rng, (spec.k, spec.cin, spec.cout), fan_in), requires_grad=True)
        params[f"enc.{spec.name}.b"] = Tensor(np.zeros(spec.cout), requires_grad=True)
    for name, cin, cout in _PROJECTIONS:
        params[f"enc.{name}.w"] = Tensor(_he(rng, (cin, cout), cin), requires_grad=True)
        params[f"enc.{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


class EncodePlan:
    """Geometry-dependent kernel maps, reusable across steps for one cloud."""

    def __init__(self, base_coords: np.ndarray):
        self.empty = len(base_coords) == 0
        if self.empty:
            return
        c1 = base_coords
        self.subm1_in = _subm_pairs(c1, _CoordSet(c1))
        c2, self.down1 = _down_pairs(c1)
        self.mid2 = _subm_pairs(c2, _CoordSet(c2))
        c4, self.down2 = _down_pairs(c2)
        self.mid4 = _subm_pairs(c4, _CoordSet(c4))
        c8, self.down3 = _down_pairs(c4)
        self.mid8 = _subm_pairs(c8, _CoordSet(c8))
        u4, self.up3 = _up_pairs(c8)
        self.dec4 = _subm_pairs(u4, _CoordSet(u4))
        self.skip4_idx = _CoordSet(u4).lookup(c4)
        u2, self.up2 = _up_pairs(u4)
        self.dec2 = _subm_pairs(u2, _CoordSet(u2))
        self.skip2_idx = _CoordSet(u2).lookup(c2)
        u1, self.up1 = _up_pairs(u2)
        self.dec1 = _subm_pairs(u1, _CoordSet(u1))
        self.skip1_idx = _CoordSet(u1).lookup(c1)
        self.coords = {8: c8, 4: u4, 2: u2, 1: u1}
        self.n = {1: len(c1), "c2": len(c2), "c4": len(c4), 8: len(c8), "u4": len(u4), "u2": len(u2), "u1": len(u1)}
        # generative children always cover the parents' floor-div support
        assert (self.skip4_idx >= 0).all()
        assert (self.skip2_idx >= 0).all()
        assert (self.skip1_idx >= 0).all()


def _conv(params, name: str, x: Tensor, pairs, n_out: int) -> Tensor:
    return T.offset_linear(x, params[f"enc.{name}.w"], params[f"enc.{name}.b"], pairs, n_out)


def _proj(params, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, params[f"enc.{name}.w"]), params[f"enc.{name}.b"])


def _skip_add(params, name: str, up_out: Tensor, skip_feats: Tensor, skip_idx: np.ndarray) -> Tensor:
    projected = _proj(params, name, skip_feats)
    return T.add(up_out, T.scatter_rows(projected, skip_idx, up_out.value.shape[0]))


def encode(params: dict[str, Tensor], base: SparseVolume, plan: EncodePlan | None = None) -> FeatureVolumePyramid:
    """Sparse UNet forward; returns volumes at strides 8, 4, 2, 1."""
    cell = base.cell
    if plan is None:
        plan = EncodePlan(base.coords)
    if plan.empty:
        empty = lambda s: SparseVolume(s, np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, FEATURE_CHANNELS))), cell)
        return FeatureVolumePyramid([empty(s) for s in STRIDES])
    h1 = T.relu(_conv(params, "stem", base.feats, plan.subm1_in, plan.n[1]))
    h2 = T.relu(_conv(params, "down1", h1, plan.down1, plan.n["c2"]))
    h2 = T.relu(_conv(params, "mid2", h2, plan.mid2, plan.n["c2"]))
    h4 = T.relu(_conv(params, "down2", h2, plan.down2, plan.n["c4"]))
    h4 = T.relu(_conv(params, "mid4", h4, plan.mid4, plan.n["c4"]))
    h8 = T.relu(_conv(params, "down3", h4, plan.down3, plan.n[8]))
    h8 = T.relu(_conv(params, "mid8", h8, plan.mid8, plan.n[8]))

    u4 = _conv(params, "up3", h8, plan.up3, plan.n["u4"])
    u4 = T.relu(_skip_add(params, "skip4", u4, h4, plan.skip4_idx))
    u4 = T.relu(_conv(params, "dec4", u4, plan.dec4, plan.n["u4"]))
    u2 = _conv(params, "up2", u4, plan.up2, plan.n["u2"])
    u2 = T.relu(_skip_add(params, "skip2", u2, h2, plan.skip2_idx))
    u2 = T.relu(_conv(params, "dec2", u2, plan.dec2, plan.n["u2"]))
    u1 = _conv(params, "up1", u2, plan.up1, plan.n["u1"])
    u1 = T.relu(_skip_add(params, "skip1", u1, h1, plan.skip1_idx))
    u1 = T.relu(_conv(params, "dec1", u1, plan.dec1, plan.n["u1"]))

    vols = [
        SparseVolume(8, plan.coords[8], _proj(params, "tap8", h8), cell),
        SparseVolume(4, plan.coords[4], _proj(params, "tap4", u4), cell),
        SparseVolume(2, plan.coords[2], _proj(params, "tap2", u2), cell),
        SparseVolume(1, plan.coords[1], _proj(params, "tap1", u1), cell),
    ]
    return FeatureVolumePyramid(vols)


# ---------------------------------------------------------------------------
# trilinear queries


def trilinear_setup(volume: SparseVolume, positions: np.ndarray):
    """Corner indices (S, 8; -1 absent) and weights (S, 8) for query points."""
    size = volume.stride * volume.cell
    g = positions / size - 0.5
    lo = np.floor(g).astype(np.int64)
    frac = g - lo
    corners = lo[:, None, :] + _KERNEL_2[None, :, :]  # (S, 8, 3)
    w = np.ones((len(positions), 8))
    for k, off in enumerate(_KERNEL_2):
        for ax in range(3):
            w[:, k] *= frac[:, ax] if off[ax] else (1.0 - frac[:, ax])
    cset = _CoordSet(volume.coords)
    idx = cset.lookup(corners.reshape(-1, 3)).reshape(len(positions), 8)
    return idx, w


def query_feature(volume: SparseVolume, positions: np.ndarray) -> Tensor:
    """Trilinear interpolation; absent corners contribute zero vectors."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if len(volume) == 0:
        return Tensor(np.zeros((len(positions), volume.channels)))
    idx, w = trilinear_setup(volume, positions)
    return T.weighted_corner_gather(volume.feats, idx, w)


# ---------------------------------------------------------------------------
# per-scale heads


_HEAD_WIDTH = 64


def init_head_params(rng: np.random.Generator, scale: int, c_in: int = FEATURE_CHANNELS, c_out: int = FEATURE_CHANNELS) -> dict[str, Tensor]:
    p = {}
    name = f"head{scale}"
    p[f"{name}.w1"] = Tensor(_he(rng, (c_in, _HEAD_WIDTH), c_in), requires_grad=True)
    p[f"{name}.b1"] = Tensor(np.zeros(_HEAD_WIDTH), requires_grad=True)
    p[f"{name}.w2"] = Tensor(_he(rng, (_HEAD_WIDTH, _HEAD_WIDTH), _HEAD_WIDTH), requires_grad=True)
    p[f"{name}.b2"] = Tensor(np.zeros(_HEAD_WIDTH), requires_grad=True)
    p[f"{name}.ws"] = Tensor(_he(rng, (_HEAD_WIDTH, 1), _HEAD_WIDTH), requires_grad=True)
    p[f"{name}.bs"] = Tensor(np.zeros(1), requires_grad=True)
    p[f"{name}.wf"] = Tensor(_he(rng, (_HEAD_WIDTH, c_out), _HEAD_WIDTH), requires_grad=True)
    p[f"{name}.bf"] = Tensor(np.zeros(c_out), requires_grad=True)
    return p


def head_eval(params: dict[str, Tensor], scale: int, features: Tensor, with_color: bool = False):
    """(density (S, 1), feature (S, C)); optionally (..., color (S, 3)).

    Two hidden relu layers of width 64; density through softplus; the color
    output passes the first three feature channels through a sigmoid.
    """
    name = f"head{scale}"
    h = T.relu(T.add(T.matmul(features, params[f"{name}.w1"]), params[f"{name}.b1"]))
    h = T.relu(T.add(T.matmul(h, params[f"{name}.w2"]), params[f"{name}.b2"]))
    sigma = T.softplus(T.add(T.matmul(h, params[f"{name}.ws"]), params[f"{name}.bs"]))
    feat = T.add(T.matmul(h, params[f"{name}.wf"]), params[f"{name}.bf"])
    if not with_color:
        return sigma, feat
    color = T.sigmoid(T.narrow(feat, 1, 0, 3))
    return sigma, feat, color


# ---------------------------------------------------------------------------
# full field stack


class MultiScaleFields:
    """Encoder + heads bundled with their parameters and the base cell size."""

    def __init__(self, cell: float = 0.08, seed: int = 0):
        self.cell = cell
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = init_encoder_params(rng)
        for scale in range(1, len(STRIDES) + 1):
            self.params.update(init_head_params(rng, scale))
        self._plan_cache: tuple[int, EncodePlan] | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def plan_for(self, base: SparseVolume) -> EncodePlan:
        key = hash(base.coords.tobytes())
        if self._plan_cache is None or self._plan_cache[0] != key:
            self._plan_cache = (key, EncodePlan(base.coords))
        return self._plan_cache[1]

    def encode_cloud(self, cloud: PointCloud) -> FeatureVolumePyramid:
        base = voxelize(cloud, self.cell)
        return encode(self.params, base, self.plan_for(base))

    def eval_points(self, pyramid: FeatureVolumePyramid, scale: int, positions: np.ndarray, with_color: bool = False):
        """Query scale `scale` (1 = coarsest stride 8) and run its head."""
        vol = pyramid.volumes[scale - 1]
        feats = query_feature(vol, positions)
        return head_eval(self.params, scale, feats, with_color=with_color)


def densify(
    cloud: PointCloud,
    fields: MultiScaleFields,
    samples_per_point: int,
    r: float,
    density_keep: float = 10.0,
    seed: int = 0,
    pyramid: FeatureVolumePyramid | None = None,
) -> PointCloud:
    """Upsample a cloud by querying the finest field near existing points.

    Candidates are drawn uniformly in each point's radius-r ball; those whose
    predicted density reaches `density_keep` are kept with predicted colors.
    """
    if samples_per_point < 1:
        return cloud
    if pyramid is None:
        pyramid = fields.encode_cloud(cloud)
    rng = np.random.default_rng(seed)
    k = len(cloud)
    dirs = rng.normal(size=(k * samples_per_point, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = r * np.cbrt(rng.uniform(0.0, 1.0, size=(k * samples_per_point, 1)))
    candidates = np.repeat(cloud.positions, samples_per_point, axis=0) + dirs * radii
    finest = len(STRIDES)
    # chunked so the tape's retained intermediates stay bounded
    keep_parts, color_parts = [], []
    for s in range(0, len(candidates), 16384):
        sigma, _, color = fields.eval_points(pyramid, finest, candidates[s : s + 16384], with_color=True)
        keep_parts.append(sigma.value[:, 0] >= density_keep)
        color_parts.append(color.value)
    keep = np.concatenate(keep_parts)
    new_pos = candidates[keep]
    new_col = np.clip(np.concatenate(color_parts)[keep], 0.0, 1.0)
    return PointCloud(
        np.vstack([cloud.positions, new_pos]), np.vstack([cloud.colors, new_col])
    )
