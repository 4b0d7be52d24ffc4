"""End-to-end render pipeline: rays -> samples -> fields -> maps -> image.

ScenePlan caches everything reusable across steps and cameras for one cloud:
the voxel index for point-guided sampling, per-camera ray bundles with their
near/far bounds, and the encoded feature pyramid.  render_view reports wall
time for each stage (sampling, field evaluation, rendering, decoding) plus
the mean count of valid samples per ray, so sampler strategies can be
compared on equal footing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .camera import Camera, RayBundle, generate_rays
from .decoder import decode
from .fields import FeatureVolumePyramid, MultiScaleFields, STRIDES
from .pointcloud import PointCloud
from .rendering import RenderedFeatureMaps, render_features
from .sampling import SampleSet, ray_near_far, sample_coarse_to_fine, sample_point_guided, sample_uniform
from .tensor import Tensor
from .voxel_index import VoxelIndex, build_voxel_index

__all__ = ["ScenePlan", "RenderResult", "render_view", "SAMPLERS"]

SAMPLERS = ("uniform", "c2f", "point")


@dataclass
class RenderResult:
    image: Tensor  # (3, 8*H_r, 8*W_r)
    rgb_direct: Tensor | None  # (3, H_r, W_r) volume-rendered color, diagnostic
    maps: RenderedFeatureMaps
    samples: SampleSet
    timings: dict[str, float]
    mean_valid: float
    eval_count: int


class ScenePlan:
    """Per-cloud caches shared by every render of the same scene."""

    def __init__(
        self,
        cloud: PointCloud,
        fields: MultiScaleFields,
        r: float,
        bounds_lo,
        bounds_hi,
    ):
        if r > fields.cell + 1e-12:
            raise ValueError(f"sampling radius {r} exceeds the index cell {fields.cell}")
        self.cloud = cloud
        self.fields = fields
        self.r = float(r)
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
        self.index: VoxelIndex = build_voxel_index(cloud, fields.cell)
        self._ray_cache: dict[tuple[int, tuple[int, int]], tuple[RayBundle, np.ndarray, np.ndarray]] = {}
        self._pyramid: FeatureVolumePyramid | None = None

    def rays_for(self, camera: Camera, grid: tuple[int, int]):
        """(bundle, near, far) for a camera, cached by identity and grid."""
        key = (id(camera), tuple(grid))
        if key not in self._ray_cache:
            bundle = generate_rays(camera, grid)
            near, far = ray_near_far(bundle.origins, bundle.directions, self.bounds_lo, self.bounds_hi)
            self._ray_cache[key] = (bundle, near, far)
        return self._ray_cache[key]

    def encode(self, refresh: bool = False) -> FeatureVolumePyramid:
        """Feature pyramid for the cloud; cached until refresh (param update)."""
        if self._pyramid is None or refresh:
            self._pyramid = self.fields.encode_cloud(self.cloud)
        return self._pyramid


def _sample(
    plan: ScenePlan,
    bundle: RayBundle,
    near: np.ndarray,
    far: np.ndarray,
    sampler: str,
    n: int,
    rng: np.random.Generator | None,
    pyramid: FeatureVolumePyramid,
) -> SampleSet:
    if sampler == "uniform":
        return sample_uniform(bundle, near, far, n, rng)
    if sampler == "point":
        return sample_point_guided(bundle, plan.index, plan.r, near, far, n, rng)
    if sampler == "c2f":
        # coarse pass: half the budget uniformly, alphas from the finest scale
        coarse = sample_uniform(bundle, near, far, n // 2, rng)
        finest = len(STRIDES)
        sigma, _ = plan.fields.eval_points(pyramid, finest, coarse.positions.reshape(-1, 3))
        sig = sigma.value.reshape(coarse.depths.shape)
        alphas = 1.0 - np.exp(-sig * coarse.deltas)
        return sample_coarse_to_fine(bundle, near, far, n, alphas, rng)
    raise ValueError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")


def render_view(
    plan: ScenePlan,
    decoder_params: dict[str, Tensor],
    camera: Camera,
    grid: tuple[int, int],
    n_samples: int = 128,
    sampler: str = "point",
    rng: np.random.Generator | None = None,
    refresh_pyramid: bool = False,
    with_direct_rgb: bool = False,
) -> RenderResult:
    """Render one camera through the full pipeline with stage timings.

    The encoder runs inside the field stage when the cached pyramid is stale
    (refresh_pyramid=True, e.g. after an optimizer step) or absent.  Passing
    rng=None renders deterministically (cell-center depths).
    """
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    pyramid = plan.encode(refresh=refresh_pyramid)
    timings["field"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bundle, near, far = plan.rays_for(camera, grid)
    samples = _sample(plan, bundle, near, far, sampler, n_samples, rng, pyramid)
    timings["sampling"] = time.perf_counter() - t0

    maps = render_features(plan.fields, pyramid, samples, grid, with_rgb=with_direct_rgb, timings=timings)

    t0 = time.perf_counter()
    image = decode(decoder_params, maps.maps)
    timings["decode"] = time.perf_counter() - t0

    return RenderResult(
        image=image,
        rgb_direct=maps.rgb,
        maps=maps,
        samples=samples,
        timings=timings,
        mean_valid=float(samples.valid.sum(axis=1).mean()),
        eval_count=int(sum(maps.eval_counts)),
    )
