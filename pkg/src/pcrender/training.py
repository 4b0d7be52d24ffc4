"""Optimization loop: one camera per step, full-pipeline render, combined
loss, AdamW update on an exponentially decaying learning rate.

The loop is deterministic under a fixed seed: a single RNG drives camera
choice, depth jitter, and point-batch resampling in a fixed order, while
evaluation renders are jitter-free and consume no randomness.  Metric rows
are logged at eval intervals as CSV with the header
step,loss_total,loss_pc,loss_nr,loss_per,psnr,ssim.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .camera import Camera
from .fields import MultiScaleFields
from .losses import LossWeights, PerceptualExtractor, loss_nr, loss_pc, loss_per, total_loss
from .metrics import psnr, ssim
from .optim import AdamW, exp_lr
from .pointcloud import PointCloud
from .renderer import SAMPLERS, ScenePlan, render_view
from .tensor import Tensor

__all__ = ["LOG_HEADER", "SceneData", "TrainConfig", "TrainResult", "TrainingError", "train", "write_log", "evaluate"]

LOG_HEADER = ("step", "loss_total", "loss_pc", "loss_nr", "loss_per", "psnr", "ssim")


class TrainingError(RuntimeError):
    """Raised when optimization cannot continue (e.g. a NaN loss)."""


@dataclass
class SceneData:
    """A cloud with posed cameras and their ground-truth images (V, H, W, 3)."""

    cloud: PointCloud
    cameras: list[Camera]
    images: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if len(self.cameras) != self.images.shape[0]:
            raise ValueError(f"{len(self.cameras)} cameras but {self.images.shape[0]} images")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("ground-truth images must lie in [0, 1]")


@dataclass
class TrainConfig:
    steps: int = 2000
    grid: tuple[int, int] = (16, 16)
    n_samples: int = 128
    sampler: str = "point"
    r: float = 0.08
    seed: int = 0
    eval_interval: int = 50
    lr_start: float = 4e-3
    lr_end: float = 4e-4
    pc_batch: int = 1024
    target_psnr: float | None = None  # early stop once both targets are met at an eval
    target_ssim: float | None = None

    def __post_init__(self):
        for name in ("steps", "n_samples", "eval_interval", "pc_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.grid) != 2 or min(self.grid) <= 0:
            raise ValueError(f"grid must be two positive ints, got {self.grid}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ValueError("learning-rate endpoints must be nonnegative")
        # geometric decay needs both endpoints positive; a frozen run (both 0) is allowed
        if (self.lr_start == 0) != (self.lr_end == 0):
            raise ValueError("either both learning-rate endpoints are zero or neither is")


@dataclass
class TrainResult:
    log: list[dict]
    steps_run: int
    final_psnr: float
    final_ssim: float
    skipped_updates: int


def _chw(img_hwc: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img_hwc.transpose(2, 0, 1))


def evaluate(
    plan: ScenePlan,
    decoder_params: dict[str, Tensor],
    data: SceneData,
    config: TrainConfig,
) -> tuple[float, float]:
    """Mean PSNR/SSIM over the training views, rendered without jitter.

    The first render re-encodes the pyramid so metrics always reflect the
    current parameters.
    """
    ps, ss = [], []
    for i, (cam, gt) in enumerate(zip(data.cameras, data.images)):
        res = render_view(
            plan, decoder_params, cam, config.grid, config.n_samples,
            config.sampler, rng=None, refresh_pyramid=i == 0,
        )
        pred = res.image.value.transpose(1, 2, 0)
        ps.append(psnr(pred, gt))
        ss.append(ssim(pred, gt))
    return float(np.mean(ps)), float(np.mean(ss))


def _dump_diagnostics(path: Path, step: int, view: int, point_idx: np.ndarray, parts: dict[str, float]) -> None:
    np.savez(
        path,
        step=np.int64(step),
        view=np.int64(view),
        point_batch=point_idx,
        **{k: np.float64(v) for k, v in parts.items()},
    )


def train(
    data: SceneData,
    fields: MultiScaleFields,
    decoder_params: dict[str, Tensor],
    config: TrainConfig,
    weights: LossWeights | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Optimize field + decoder parameters to reproduce the training views.

    One camera is drawn per step; the render, the point-batch density/color
    penalty, and the perceptual distance share a single backward pass.  A NaN
    loss aborts with a diagnostic dump of the offending batch (written next
    to out_dir when given).
    """
    weights = LossWeights() if weights is None else weights
    hr, wr = config.grid
    v, h, w, _ = data.images.shape
    if (h, w) != (8 * hr, 8 * wr):
        raise ValueError(f"ground-truth images are {h}x{w} but the decoder emits {8 * hr}x{8 * wr}")

    plan = ScenePlan(data.cloud, fields, config.r, data.bounds_lo, data.bounds_hi)
    params = dict(fields.named_parameters())
    params.update(decoder_params)
    opt = AdamW(list(params.values()))
    extractor = PerceptualExtractor(seed=0)
    rng = np.random.default_rng(config.seed)
    targets_chw = [_chw(img) for img in data.images]
    n_points = len(data.cloud)

    log: list[dict] = []
    steps_run = 0
    final_psnr = final_ssim = float("nan")
    for step in range(config.steps):
        view = int(rng.integers(v))
        point_idx = rng.integers(0, n_points, size=min(config.pc_batch, n_points))
        res = render_view(
            plan, decoder_params, data.cameras[view], config.grid,
            config.n_samples, config.sampler, rng=rng, refresh_pyramid=True,
        )
        pyramid = plan.encode()
        l_pc = loss_pc(fields, pyramid, data.cloud, point_idx, weights.density_threshold)
        l_nr = loss_nr(res.image, targets_chw[view])
        l_per = loss_per(res.image, targets_chw[view], extractor)
        total = total_loss(l_pc, l_nr, l_per, weights)
        parts = {
            "loss_total": float(total.value),
            "loss_pc": float(l_pc.value),
            "loss_nr": float(l_nr.value),
            "loss_per": float(l_per.value),
        }
        if not np.isfinite(parts["loss_total"]):
            dump = Path(out_dir or ".") / f"nan_dump_step{step}.npz"
            _dump_diagnostics(dump, step, view, point_idx, parts)
            raise TrainingError(f"non-finite loss at step {step} (view {view}); diagnostics in {dump}")

        opt.zero_grad()
        T.backward(total)
        opt.step(exp_lr(step, config.steps, config.lr_start, config.lr_end))
        steps_run = step + 1

        last = step == config.steps - 1
        if step % config.eval_interval == 0 or last:
            final_psnr, final_ssim = evaluate(plan, decoder_params, data, config)
            row = dict(zip(LOG_HEADER, (step, *(parts[k] for k in LOG_HEADER[1:5]), final_psnr, final_ssim)))
            log.append(row)
            met_psnr = config.target_psnr is None or final_psnr >= config.target_psnr
            met_ssim = config.target_ssim is None or final_ssim >= config.target_ssim
            stopping = (config.target_psnr is not None or config.target_ssim is not None) and met_psnr and met_ssim
            if stopping:
                break
    return TrainResult(log, steps_run, final_psnr, final_ssim, opt.nan_skips)


def write_log(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        writer.writeheader()
        writer.writerows(log)
