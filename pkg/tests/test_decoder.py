"""Decoder stages: fusion modulation, sub-pixel upsampling, shape laws."""

import numpy as np
import pytest

from pcrender import tensor as T
from pcrender.decoder import (
    STAGE_CHANNELS,
    decode,
    fuse,
    init_decoder_params,
    to_rgb,
    upsample2x,
)
from pcrender.fields import FEATURE_CHANNELS
from pcrender.tensor import Tensor, backward, grad_check


def _params(seed=0):
    return init_decoder_params(np.random.default_rng(seed))


def test_fuse_identity_modulation_equals_layer_norm():
    params = _params()
    c = STAGE_CHANNELS[0]
    params["dec.cond0.w"].value[...] = 0.0
    params["dec.cond0.b"].value[:c] = 1.0
    params["dec.cond0.b"].value[c:] = 0.0
    rng = np.random.default_rng(1)
    state = Tensor(rng.normal(size=(c, 5, 6)))
    rendered = Tensor(rng.normal(size=(FEATURE_CHANNELS, 5, 6)))
    out = fuse(params, 0, state, rendered)
    ref = T.layer_norm(state, axis=0)
    assert np.array_equal(out.value, ref.value)


def test_fuse_zero_scale_returns_shift():
    params = _params()
    c = STAGE_CHANNELS[1]
    params["dec.cond1.w"].value[...] = 0.0
    params["dec.cond1.b"].value[:c] = 0.0
    params["dec.cond1.b"].value[c:] = 0.75
    rng = np.random.default_rng(2)
    state = Tensor(rng.normal(size=(c, 3, 4)))
    rendered = Tensor(rng.normal(size=(FEATURE_CHANNELS, 3, 4)))
    out = fuse(params, 1, state, rendered)
    assert np.array_equal(out.value, np.full((c, 3, 4), 0.75))


def test_fuse_spatial_mismatch_rejected():
    params = _params()
    state = Tensor(np.zeros((STAGE_CHANNELS[0], 4, 4)))
    rendered = Tensor(np.zeros((FEATURE_CHANNELS, 2, 2)))
    with pytest.raises(ValueError, match="does not match"):
        fuse(params, 0, state, rendered)


def test_fuse_gradient():
    params = _params(3)
    rng = np.random.default_rng(3)
    state = Tensor(rng.normal(size=(STAGE_CHANNELS[0], 3, 3)))
    rendered = Tensor(rng.normal(size=(FEATURE_CHANNELS, 3, 3)))

    def f(ts):
        return T.tsum(T.square(fuse(params, 0, ts[0], ts[1])))

    err = grad_check(f, [state, rendered], h=1e-4)
    assert err < 1e-4


def test_depth_to_space_four_channel_case():
    # (4, 1, 1) -> (1, 2, 2) with out[0, dy, dx] = in[2*dy + dx]
    x = Tensor(np.array([10.0, 11.0, 12.0, 13.0]).reshape(4, 1, 1))
    y = T.pixel_shuffle2(x).value
    np.testing.assert_array_equal(y, [[[10.0, 11.0], [12.0, 13.0]]])


def test_upsample2x_shape_law():
    params = _params()
    rng = np.random.default_rng(4)
    for stage, (c, c_next) in enumerate(zip(STAGE_CHANNELS[:-1], STAGE_CHANNELS[1:])):
        x = Tensor(rng.normal(size=(c, 3, 5)))
        y = upsample2x(params, stage, x)
        assert y.value.shape == (c_next, 6, 10)


def test_pixel_shuffle_index_mapping_via_identity_conv():
    # direct check of out[c, 2y+dy, 2x+dx] = conv_out[4c + 2dy + dx, y, x]
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 3, 4))
    y = T.pixel_shuffle2(Tensor(x)).value
    for c in range(2):
        for yy in range(3):
            for xx in range(4):
                for dy in range(2):
                    for dx in range(2):
                        assert y[c, 2 * yy + dy, 2 * xx + dx] == x[4 * c + 2 * dy + dx, yy, xx]


def test_two_upsamples_quadruple_resolution():
    params = _params()
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(STAGE_CHANNELS[0], 4, 4)))
    y = upsample2x(params, 0, x)
    z = upsample2x(params, 1, y)
    assert z.value.shape == (STAGE_CHANNELS[2], 16, 16)


def test_to_rgb_zero_params_gray():
    params = _params()
    params["dec.rgb.w"].value[...] = 0.0
    params["dec.rgb.b"].value[...] = 0.0
    img = to_rgb(params, Tensor(np.random.default_rng(7).normal(size=(STAGE_CHANNELS[-1], 4, 4))))
    assert np.array_equal(img.value, np.full((3, 4, 4), 0.5))


def test_to_rgb_bounded_and_gradient():
    params = _params(8)
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(STAGE_CHANNELS[-1], 3, 3)) * 3)
    img = to_rgb(params, x)
    assert (img.value > 0).all() and (img.value < 1).all()

    def f(ts):
        return T.tsum(T.square(to_rgb(params, ts[0])))

    assert grad_check(f, [x], h=1e-4) < 1e-4


def _rand_maps(rng, hr, wr):
    return [Tensor(rng.normal(size=(FEATURE_CHANNELS, hr, wr))) for _ in STAGE_CHANNELS]


def test_decode_shape_law_16x16():
    params = _params()
    rng = np.random.default_rng(9)
    img = decode(params, _rand_maps(rng, 16, 16))
    assert img.value.shape == (3, 128, 128)
    assert (img.value >= 0).all() and (img.value <= 1).all()


def test_decode_shape_law_80x60():
    params = _params()
    rng = np.random.default_rng(10)
    img = decode(params, _rand_maps(rng, 60, 80))
    assert img.value.shape == (3, 480, 640)


def test_decode_wrong_map_count_rejected():
    params = _params()
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError, match="rendered maps"):
        decode(params, _rand_maps(rng, 4, 4)[:3])


def test_decode_deterministic():
    params = _params(12)
    rng = np.random.default_rng(12)
    maps = _rand_maps(rng, 4, 4)
    a = decode(params, maps).value
    b = decode(params, maps).value
    assert np.array_equal(a, b)


def test_decode_gradient_reaches_constant():
    params = _params(13)
    rng = np.random.default_rng(13)
    maps = _rand_maps(rng, 2, 2)
    img = decode(params, maps)
    backward(T.tsum(T.square(img)))
    assert np.abs(params["dec.const"].grad).max() > 0
    assert np.abs(params["dec.rgb.w"].grad).max() > 0
