"""Fusion decoder: rendered feature maps to the final RGB image.

Starting from a learned constant map at the ray-grid resolution, each stage
modulates the running feature map with scale/shift predicted from one
rendered map (conditional layer normalization), and the first three stages
double the resolution by channel-expanding convolution + depth-to-space.
Four fusions with three doublings give an x8 output, finished by a 3x3
convolution to RGB with a sigmoid.

Rendered maps arrive at ray-grid resolution and are resized to the current
stage resolution by nearest-neighbor replication before fusion.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .fields import FEATURE_CHANNELS
from .tensor import Tensor

__all__ = ["init_decoder_params", "fuse", "upsample2x", "to_rgb", "decode", "STAGE_CHANNELS", "UPSCALE"]

STAGE_CHANNELS = (64, 64, 32, 16)
UPSCALE = 8  # 2 ** (number of stages - 1)


def _he(rng: np.random.Generator, shape, fan_in: float) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_decoder_params(rng: np.random.Generator, c_in: int = FEATURE_CHANNELS) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["dec.const"] = Tensor(rng.normal(0.0, 1.0, size=STAGE_CHANNELS[0]), requires_grad=True)
    for l, c in enumerate(STAGE_CHANNELS):
        # one 3x3 conv emits scale and shift: first c channels scale, rest shift
        p[f"dec.cond{l}.w"] = Tensor(_he(rng, (2 * c, c_in, 3, 3), 9 * c_in), requires_grad=True)
        bias = np.zeros(2 * c)
        bias[:c] = 1.0  # start near identity modulation
        p[f"dec.cond{l}.b"] = Tensor(bias, requires_grad=True)
        if l + 1 < len(STAGE_CHANNELS):
            c_next = STAGE_CHANNELS[l + 1]
            p[f"dec.up{l}.w"] = Tensor(_he(rng, (4 * c_next, c, 3, 3), 9 * c), requires_grad=True)
            p[f"dec.up{l}.b"] = Tensor(np.zeros(4 * c_next), requires_grad=True)
    p["dec.rgb.w"] = Tensor(_he(rng, (3, STAGE_CHANNELS[-1], 3, 3), 9 * STAGE_CHANNELS[-1]), requires_grad=True)
    p["dec.rgb.b"] = Tensor(np.zeros(3), requires_grad=True)
    return p


def fuse(params: dict[str, Tensor], stage: int, state: Tensor, rendered: Tensor) -> Tensor:
    """Conditionally normalize `state` with (scale, shift) from `rendered`.

    rendered must already match the state's spatial dims.
    """
    if rendered.value.shape[1:] != state.value.shape[1:]:
        raise ValueError(
            f"stage {stage}: rendered map {rendered.value.shape[1:]} does not match state {state.value.shape[1:]}"
        )
    c = state.value.shape[0]
    gb = T.conv2d(rendered, params[f"dec.cond{stage}.w"], params[f"dec.cond{stage}.b"], padding=1)
    gamma = T.narrow(gb, 0, 0, c)
    beta = T.narrow(gb, 0, c, c)
    normed = T.layer_norm(state, axis=0)  # per spatial site, across channels
    return T.add(T.mul(gamma, normed), beta)


def upsample2x(params: dict[str, Tensor], stage: int, state: Tensor) -> Tensor:
    """Channel-expanding conv then depth-to-space; doubles H and W."""
    h = T.conv2d(state, params[f"dec.up{stage}.w"], params[f"dec.up{stage}.b"], padding=1)
    return T.pixel_shuffle2(h)


def to_rgb(params: dict[str, Tensor], state: Tensor) -> Tensor:
    """3x3 conv to 3 channels + sigmoid; values in (0, 1)."""
    return T.sigmoid(T.conv2d(state, params["dec.rgb.w"], params["dec.rgb.b"], padding=1))


def decode(params: dict[str, Tensor], maps: list[Tensor]) -> Tensor:
    """Full decoder: 4 rendered maps (coarse to fine) -> (3, 8*H_r, 8*W_r)."""
    if len(maps) != len(STAGE_CHANNELS):
        raise ValueError(f"expected {len(STAGE_CHANNELS)} rendered maps, got {len(maps)}")
    hr, wr = maps[0].value.shape[1:]
    state = T.broadcast_spatial(params["dec.const"], hr, wr)
    for stage in range(len(STAGE_CHANNELS)):
        factor = 2**stage
        rendered = maps[stage] if factor == 1 else T.upsample_nearest(maps[stage], factor)
        state = fuse(params, stage, state, rendered)
        if stage + 1 < len(STAGE_CHANNELS):
            state = upsample2x(params, stage, state)
    return to_rgb(params, state)
