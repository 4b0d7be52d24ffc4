"""Command-line surface: train, render, bench, densify.

Every command takes --config (INI manifest) plus flag overrides; flags win.
Exit codes: 0 success, 1 runtime failure, 2 usage or missing-file error.
Seeded runs are reproducible: identical seeds give byte-identical images,
clouds, and logs (timing and memory columns excluded).
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import load_cameras
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_grid, save_config
from .decoder import init_decoder_params
from .fields import MultiScaleFields, densify
from .image_io import load_png, save_png
from .losses import LossWeights
from .pointcloud import PlyError, PointCloud, load_ply, save_ply
from .renderer import SAMPLERS, ScenePlan, render_view
from .synthetic import generate_synthetic_scene, load_scene, raycast_gt
from .tensor import Tensor
from .training import SceneData, TrainConfig, TrainingError, train, write_log

__all__ = ["main", "CliError", "save_run_checkpoint", "load_run_checkpoint"]


class CliError(Exception):
    """Usage or IO problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# checkpoint bundling: field + decoder parameters in one file


def save_run_checkpoint(path: str | Path, fields: MultiScaleFields, decoder_params: dict[str, Tensor]) -> None:
    arrays = {name: p.value for name, p in fields.named_parameters().items()}
    arrays.update({name: p.value for name, p in decoder_params.items()})
    arrays["meta.cell"] = np.array([fields.cell])
    save_checkpoint(path, arrays)


def load_run_checkpoint(path: str | Path) -> tuple[MultiScaleFields, dict[str, Tensor]]:
    arrays = load_checkpoint(path)
    if "meta.cell" not in arrays:
        raise CheckpointError("checkpoint lacks meta.cell")
    fields = MultiScaleFields(cell=float(arrays["meta.cell"][0]))
    decoder_params: dict[str, Tensor] = {}
    for name, value in arrays.items():
        if name.startswith("meta."):
            continue
        if name.startswith("dec."):
            decoder_params[name] = Tensor(value, requires_grad=True, name=name)
        elif name in fields.params:
            if fields.params[name].value.shape != value.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            fields.params[name].value = value
        else:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
    return fields, decoder_params


# ---------------------------------------------------------------------------
# data assembly


def _require(path: str, what: str) -> Path:
    if not path:
        raise CliError(f"{what} path not set (config or flag)")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    return p


def _cloud_bounds(cloud: PointCloud, pad: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    if len(cloud) == 0:
        return np.full(3, -1.0), np.full(3, 1.0)
    return cloud.positions.min(axis=0) - pad, cloud.positions.max(axis=0) + pad


def _load_inputs(config: RunConfig, with_images: bool):
    """(cloud, cameras, bounds_lo, bounds_hi, images or None) from a scene
    spec (synthetic oracle) or from explicit cloud/camera/image files."""
    if config.scene:
        scene = load_scene(_require(config.scene, "scene"))
        cloud, cameras = generate_synthetic_scene(scene)
        images = np.stack([raycast_gt(scene, c) for c in cameras]) if with_images else None
        return cloud, cameras, scene.bounds_lo, scene.bounds_hi, images
    cloud = load_ply(_require(config.cloud, "cloud"))
    cameras = load_cameras(_require(config.cameras, "cameras"))
    images = None
    if with_images:
        img_dir = Path(config.images) if config.images else None
        if img_dir is None or not img_dir.is_dir():
            raise CliError(f"images directory not found: {config.images!r}")
        files = sorted(img_dir.glob("*.png"))
        if len(files) != len(cameras):
            raise CliError(f"{len(files)} images for {len(cameras)} cameras in {img_dir}")
        images = np.stack([load_png(f) for f in files])
    lo, hi = _cloud_bounds(cloud)
    return cloud, cameras, lo, hi, images


def _fresh_model(config: RunConfig) -> tuple[MultiScaleFields, dict[str, Tensor]]:
    fields = MultiScaleFields(cell=config.cell, seed=config.seed)
    decoder_params = init_decoder_params(np.random.default_rng(config.seed + 1))
    return fields, decoder_params


def _model_from(config: RunConfig, require_checkpoint: bool):
    if config.checkpoint:
        return load_run_checkpoint(_require(config.checkpoint, "checkpoint"))
    if require_checkpoint:
        raise CliError("checkpoint path not set (config or flag)")
    return _fresh_model(config)


# ---------------------------------------------------------------------------
# commands


def cmd_train(config: RunConfig) -> int:
    cloud, cameras, lo, hi, images = _load_inputs(config, with_images=True)
    hr, wr = config.grid
    if images.shape[1:3] != (8 * hr, 8 * wr):
        raise CliError(
            f"ground-truth images are {images.shape[1]}x{images.shape[2]} "
            f"but grid {hr}x{wr} decodes to {8 * hr}x{8 * wr}"
        )
    data = SceneData(cloud, cameras, images, lo, hi)
    fields, decoder_params = _model_from(config, require_checkpoint=False)
    train_cfg = TrainConfig(
        steps=config.steps,
        grid=config.grid,
        n_samples=config.samples,
        sampler=config.sampler,
        r=config.radius,
        seed=config.seed,
        eval_interval=config.eval_interval,
        lr_start=config.lr_start,
        lr_end=config.lr_end,
        pc_batch=config.pc_batch,
    )
    weights = LossWeights(config.w_pc, config.w_nr, config.w_per, config.density_threshold)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(data, fields, decoder_params, train_cfg, weights, out_dir=out)
    write_log(out / "train_log.csv", result.log)
    save_run_checkpoint(out / "checkpoint.p2px", fields, decoder_params)
    save_config(replace(config, checkpoint=str(out / "checkpoint.p2px")), out / "run.ini")
    print(
        f"trained {result.steps_run} steps: psnr={result.final_psnr:.2f} dB "
        f"ssim={result.final_ssim:.4f} (log: {out / 'train_log.csv'})"
    )
    return 0


def cmd_render(config: RunConfig) -> int:
    fields, decoder_params = _model_from(config, require_checkpoint=True)
    cloud, cameras, lo, hi, _ = _load_inputs(config, with_images=False)
    plan = ScenePlan(cloud, fields, config.radius, lo, hi)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cam in enumerate(cameras):
        res = render_view(
            plan, decoder_params, cam, config.grid, config.samples,
            config.sampler, rng=None, refresh_pyramid=i == 0,
        )
        save_png(out / f"view_{i:03d}.png", res.image.value.transpose(1, 2, 0))
        t = res.timings
        rows.append(
            {
                "view": i,
                "sampling_s": f"{t['sampling']:.6f}",
                "field_s": f"{t['field']:.6f}",
                "render_s": f"{t['render']:.6f}",
                "decode_s": f"{t['decode']:.6f}",
                "total_s": f"{sum(t.values()):.6f}",
                "mean_valid": f"{res.mean_valid:.6f}",
            }
        )
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    mean_valid = float(np.mean([float(r["mean_valid"]) for r in rows]))
    print(f"rendered {len(cameras)} views to {out} (mean valid samples/ray: {mean_valid:.2f})")
    return 0


def cmd_bench(config: RunConfig) -> int:
    fields, decoder_params = _model_from(config, require_checkpoint=False)
    cloud, cameras, lo, hi, _ = _load_inputs(config, with_images=False)
    plan = ScenePlan(cloud, fields, config.radius, lo, hi)
    plan.encode(refresh=True)  # warm the pyramid so samplers compare fairly
    camera = cameras[0]
    rows = []
    for sampler in SAMPLERS:
        tracemalloc.start()
        t0 = time.perf_counter()
        res = render_view(plan, decoder_params, camera, config.grid, config.samples, sampler, rng=None)
        seconds = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append(
            {
                "sampler": sampler,
                "mean_valid_samples": f"{res.mean_valid:.6f}",
                "field_evals": res.eval_count,
                "render_seconds": f"{seconds:.6f}",
                "peak_mem_bytes": peak,
            }
        )
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(
            f"{row['sampler']:>8}: valid/ray={float(row['mean_valid_samples']):8.2f} "
            f"evals={row['field_evals']:8d} time={float(row['render_seconds']):.3f}s "
            f"peak={int(row['peak_mem_bytes']) // 1024} KiB"
        )
    return 0


def cmd_densify(config: RunConfig) -> int:
    fields, _ = _model_from(config, require_checkpoint=True)
    cloud, _, _, _, _ = _load_inputs(config, with_images=False)
    dense = densify(
        cloud, fields,
        samples_per_point=config.samples,
        r=config.radius,
        density_keep=config.density_threshold,
        seed=config.seed,
    )
    out = Path(config.out)
    if out.suffix.lower() != ".ply":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "densified.ply"
    save_ply(dense, out)
    print(f"densified {len(cloud)} -> {len(dense)} points ({out})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcrender", description="Point-cloud neural renderer")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "optimize field and decoder parameters on a scene"),
        ("render", "render all cameras through a trained checkpoint"),
        ("bench", "compare ray samplers on one view"),
        ("densify", "upsample a cloud using a trained density field"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sampler", choices=SAMPLERS, default=None)
        p.add_argument("--rays", default=None, metavar="HxW", help="ray grid, e.g. 16x16")
        p.add_argument("--radius", type=float, default=None, help="point-guided validity radius (m)")
        p.add_argument("--samples", type=int, default=None, help="samples per ray (densify: per point)")
        p.add_argument("--out", default=None, help="output directory (densify: dir or .ply)")
        p.add_argument("--scene", default=None, help="synthetic scene spec file")
        p.add_argument("--cloud", default=None, help="input cloud (.ply)")
        p.add_argument("--cameras", default=None, help="camera list file")
        p.add_argument("--images", default=None, help="ground-truth image directory (train)")
        p.add_argument("--checkpoint", default=None, help="parameter file (.p2px)")
        p.add_argument("--steps", type=int, default=None, help="training steps")
    return parser


_OVERRIDES = ("seed", "sampler", "radius", "samples", "out", "scene", "cloud", "cameras", "images", "checkpoint", "steps")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    updates = {name: getattr(args, name) for name in _OVERRIDES if getattr(args, name) is not None}
    if args.rays is not None:
        updates["grid"] = parse_grid(args.rays)
    return replace(config, **updates)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "render": cmd_render, "bench": cmd_bench, "densify": cmd_densify}
    try:
        config = _config_from_args(args)
        return handlers[args.command](config)
    except (CliError, ConfigError, PlyError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
