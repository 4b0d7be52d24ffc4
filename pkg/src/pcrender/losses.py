"""Training losses: point-cloud supervision, image reconstruction, and a
frozen multi-scale perceptual distance.

The perceptual extractor is a fixed 4-level stride-2 convolution pyramid
with random near-orthogonal weights: a dependency-free stand-in for a
pretrained feature network.  It is frozen (no parameter gradients) but
differentiable with respect to its input images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fields import FeatureVolumePyramid, MultiScaleFields, STRIDES
from .pointcloud import PointCloud
from .tensor import Tensor

__all__ = ["LossWeights", "PerceptualExtractor", "loss_pc", "loss_nr", "loss_per", "total_loss"]


@dataclass
class LossWeights:
    pc: float = 0.1
    nr: float = 1.0
    per: float = 0.1
    density_threshold: float = 10.0

    def __post_init__(self):
        if min(self.pc, self.nr, self.per) < 0 or self.density_threshold <= 0:
            raise ValueError("loss weights must be nonnegative and the density threshold positive")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_pc(
    fields: MultiScaleFields,
    pyramid: FeatureVolumePyramid,
    cloud: PointCloud,
    point_idx: np.ndarray,
    density_threshold: float = 10.0,
) -> Tensor:
    """Mean over the batch of |c_hat - c|^2 + (1/D) * max(0, D - sigma).

    Colors and densities come from the finest-scale field queried at the
    point locations; the hinge pushes densities at real points above D.
    """
    point_idx = np.asarray(point_idx, dtype=np.int64)
    pos = cloud.positions[point_idx]
    gt = cloud.colors[point_idx]
    sigma, _, color = fields.eval_points(pyramid, len(STRIDES), pos, with_color=True)
    diff = T.cadd(color, -gt)
    color_term = T.tsum(T.square(diff), axis=1)  # squared L2 norm per point
    hinge = T.relu(T.shift(T.neg(sigma), density_threshold))  # max(0, D - sigma)
    per_point = T.add(color_term, T.scale(T.reshape(hinge, (len(point_idx),)), 1.0 / density_threshold))
    return T.mean(per_point)


def loss_nr(image: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a fixed target image (same layout)."""
    image = _as_tensor(image)
    target = np.asarray(target, dtype=np.float64)
    if image.value.shape != target.shape:
        raise ValueError(f"image shapes differ: {image.value.shape} vs {target.shape}")
    return T.mean(T.square(T.cadd(image, -target)))


class PerceptualExtractor:
    """Frozen random conv pyramid; levels halve resolution, 16 channels."""

    def __init__(self, seed: int = 0, levels: int = 4, channels: int = 16):
        rng = np.random.default_rng(seed)
        self.levels = levels
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = 3
        for _ in range(levels):
            w = rng.normal(size=(channels, c_in * 9))
            # near-orthogonal rows keep the distance well conditioned
            q, _ = np.linalg.qr(w.T)
            w = q.T[:channels].reshape(channels, c_in, 3, 3) * np.sqrt(2.0)
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(channels)))
            c_in = channels

    def features(self, image: Tensor) -> list[Tensor]:
        """Linear responses per level; relu only feeds the next level."""
        image = _as_tensor(image)
        feats = []
        x = image
        for w, b in zip(self.weights, self.biases):
            y = T.conv2d(x, w, b, stride=2, padding=1)
            feats.append(y)
            x = T.relu(y)
        return feats


def loss_per(image: Tensor, target: np.ndarray, extractor: PerceptualExtractor) -> Tensor:
    """Sum over levels of the mean absolute feature difference."""
    image = _as_tensor(image)
    target_feats = extractor.features(Tensor(np.asarray(target, dtype=np.float64)))
    image_feats = extractor.features(image)
    out = None
    for fi, ft in zip(image_feats, target_feats):
        lvl = T.mean(T.absval(T.cadd(fi, -ft.value)))
        out = lvl if out is None else T.add(out, lvl)
    return out


def total_loss(l_pc: Tensor, l_nr: Tensor, l_per: Tensor, weights: LossWeights) -> Tensor:
    return T.add(
        T.scale(l_pc, weights.pc), T.add(T.scale(l_nr, weights.nr), T.scale(l_per, weights.per))
    )
