"""Volume rendering: transmittance-weighted accumulation of colors and
per-scale feature maps along rays.

Weights follow the standard emission-absorption model: with optical depths
s_i = sigma_i * delta_i, alpha_i = 1 - exp(-s_i), T_i = exp(-sum_{j<i} s_j),
w_i = T_i * alpha_i.  Invalid samples enter as sigma = 0 and feature = 0,
leaving the delta spacing intact, so uniform and point-guided runs are
directly comparable.  Heads are evaluated on valid samples only; the count
of head evaluations is reported for efficiency checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fields import FeatureVolumePyramid, MultiScaleFields, STRIDES
from .sampling import SampleSet
from .tensor import Tensor

__all__ = ["RenderedFeatureMaps", "compute_weights", "render_color", "render_features"]


@dataclass
class RenderedFeatureMaps:
    """Per-scale maps (C, H_r, W_r), coarse to fine; optional direct RGB map."""

    maps: list[Tensor]
    rgb: Tensor | None = None
    eval_counts: list[int] = field(default_factory=list)

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps[0].value.shape[1:]


def compute_weights(sigma, deltas: np.ndarray):
    """(weights, transmittances, alphas), each (R, N).

    sigma may be a Tensor (differentiable path) or ndarray; deltas are
    constants.  Rejects negative densities.
    """
    if not isinstance(sigma, Tensor):
        sigma = Tensor(sigma)
    if sigma.value.min() < -0.0:
        if (sigma.value < 0).any():
            raise ValueError("negative density violates the emission-absorption model")
    deltas = np.asarray(deltas, dtype=np.float64)
    if (deltas <= 0).any():
        raise ValueError("deltas must be positive")
    s = T.cmul(sigma, deltas)
    # transmittance through log-space accumulation: exp of minus the
    # exclusive prefix sum of optical depths
    trans = T.exp(T.neg(T.cumsum_exclusive(s, axis=-1)))
    alpha = T.shift(T.neg(T.exp(T.neg(s))), 1.0)
    w = T.mul(trans, alpha)
    return w, trans, alpha


def render_color(weights, colors):
    """Per-ray color: sum_i w_i * c_i; (R, N) x (R, N, 3) -> (R, 3)."""
    if not isinstance(weights, Tensor):
        weights = Tensor(weights)
    if not isinstance(colors, Tensor):
        colors = Tensor(colors)
    return T.weight_sum(weights, colors)


def _scatter_dense(vals: Tensor, flat_idx: np.ndarray, rays: int, n: int) -> Tensor:
    dense = T.scatter_rows(vals, flat_idx, rays * n)
    return T.reshape(dense, (rays, n, vals.value.shape[1]))


def render_features(
    fields: MultiScaleFields,
    pyramid: FeatureVolumePyramid,
    samples: SampleSet,
    grid: tuple[int, int],
    with_rgb: bool = False,
    timings: dict[str, float] | None = None,
) -> RenderedFeatureMaps:
    """Render one feature map per scale over the ray grid.

    Each scale has its own densities, so weights are computed per scale.
    Only valid samples are evaluated; invalid ones contribute zero density
    and zero feature at unchanged delta spacing.  When a timings dict is
    given, wall time is accumulated into its "field" (head evaluation) and
    "render" (weighting and accumulation) entries.
    """
    rays, n = samples.depths.shape
    hr, wr = grid
    if rays != hr * wr:
        raise ValueError(f"{rays} rays cannot form a {hr}x{wr} grid")
    valid = samples.valid
    flat_idx = np.nonzero(valid.reshape(-1))[0]
    positions = samples.positions.reshape(-1, 3)[flat_idx]
    maps: list[Tensor] = []
    counts: list[int] = []
    rgb: Tensor | None = None
    for scale_idx, stride in enumerate(STRIDES, start=1):
        is_finest = stride == 1
        want_color = with_rgb and is_finest
        t0 = time.perf_counter()
        out = fields.eval_points(pyramid, scale_idx, positions, with_color=want_color)
        if timings is not None:
            timings["field"] = timings.get("field", 0.0) + time.perf_counter() - t0
        sigma_v, feat_v = out[0], out[1]
        counts.append(len(positions))
        t0 = time.perf_counter()
        sigma = T.reshape(_scatter_dense(sigma_v, flat_idx, rays, n), (rays, n))
        feat = _scatter_dense(feat_v, flat_idx, rays, n)
        w, _, _ = compute_weights(sigma, samples.deltas)
        pix = T.weight_sum(w, feat)  # (R, C)
        maps.append(T.to_chw(pix, hr, wr))
        if want_color:
            color = _scatter_dense(out[2], flat_idx, rays, n)
            rgb = T.to_chw(T.weight_sum(w, color), hr, wr)
        if timings is not None:
            timings["render"] = timings.get("render", 0.0) + time.perf_counter() - t0
    return RenderedFeatureMaps(maps, rgb, counts)
