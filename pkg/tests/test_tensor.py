"""Autodiff core: op correctness against finite differences, graph semantics."""

import numpy as np
import pytest

from pcrender import tensor as T
from pcrender.tensor import Tensor, backward, grad_check, GradCheckError


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_sum_semantics():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.tsum(T.mul(x, x))
    backward(y)
    first = x.grad.copy()
    y2 = T.tsum(T.mul(x, x))
    backward(y2)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(T.mul(x, x))


def test_leading_axis_broadcast_only():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    backward(T.tsum(T.add(a, b)))
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])
    # trailing-style broadcast (4,1) vs (4,3) is refused
    c = Tensor(np.ones((4, 1)))
    with pytest.raises(ValueError):
        T.add(a, c)


def test_layer_norm_shift_invariance():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 8))
    y1 = T.layer_norm(Tensor(v)).value
    y2 = T.layer_norm(Tensor(v + 100.0)).value
    np.testing.assert_allclose(y1, y2, atol=1e-9)


def test_layer_norm_constant_input_gives_zeros():
    x = Tensor(np.full((3, 6), 2.5))
    np.testing.assert_array_equal(T.layer_norm(x).value, np.zeros((3, 6)))


def test_grad_check_reports_nan_index():
    def f(ts):
        return T.tsum(T.exp(ts[0]))

    # NaN poisons the scalar output, so the first compared entry reports it.
    x = Tensor([np.nan, 1.0])
    with pytest.raises(GradCheckError) as ei:
        grad_check(f, [x])
    assert ei.value.flat_index == 0
    assert ei.value.input_pos == 0


def _rand(rng, shape):
    return Tensor(rng.normal(size=shape))


# Finite-difference sweep over the full op registry.  Each entry builds a
# scalar loss exercising one op on seeded random inputs.
def _op_cases(rng):
    idx = np.array([0, 2, 1, 2])
    uniq_idx = np.array([3, 0, 2])
    corner_idx = np.array([[0, 1, 2, -1], [3, 3, 0, 1]])
    corner_w = rng.uniform(0.1, 1.0, size=(2, 4))
    pairs = [
        (np.array([0, 1]), np.array([1, 2])),
        (np.array([2]), np.array([0])),
        (np.array([], dtype=np.int64), np.array([], dtype=np.int64)),
    ]
    return {
        "add": ([_rand(rng, (3, 4)), _rand(rng, (4,))], lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), T.add(ts[0], ts[1])))),
        "sub": ([_rand(rng, (3, 4)), _rand(rng, (4,))], lambda ts: T.tsum(T.exp(T.sub(ts[0], ts[1])))),
        "mul": ([_rand(rng, (3, 4)), _rand(rng, (4,))], lambda ts: T.tsum(T.mul(ts[0], ts[1]))),
        "neg": ([_rand(rng, (5,))], lambda ts: T.tsum(T.exp(T.neg(ts[0])))),
        "scale": ([_rand(rng, (5,))], lambda ts: T.tsum(T.mul(T.scale(ts[0], 2.5), ts[0]))),
        "shift": ([_rand(rng, (5,))], lambda ts: T.tsum(T.square(T.shift(ts[0], 1.5)))),
        "cmul": ([_rand(rng, (5,))], lambda ts: T.tsum(T.square(T.cmul(ts[0], np.arange(1.0, 6.0))))),
        "cadd": ([_rand(rng, (5,))], lambda ts: T.tsum(T.square(T.cadd(ts[0], np.arange(5.0))))),
        "matmul": ([_rand(rng, (3, 4)), _rand(rng, (4, 2))], lambda ts: T.tsum(T.square(T.matmul(ts[0], ts[1])))),
        "exp": ([_rand(rng, (4,))], lambda ts: T.tsum(T.exp(ts[0]))),
        "relu": ([Tensor(rng.normal(size=6) + 0.5)], lambda ts: T.tsum(T.square(T.relu(ts[0])))),
        "sigmoid": ([_rand(rng, (4,))], lambda ts: T.tsum(T.square(T.sigmoid(ts[0])))),
        "softplus": ([_rand(rng, (4,))], lambda ts: T.tsum(T.square(T.softplus(ts[0])))),
        "absval": ([Tensor(rng.normal(size=6) + 2.0)], lambda ts: T.tsum(T.square(T.absval(ts[0])))),
        "square": ([_rand(rng, (4,))], lambda ts: T.tsum(T.square(ts[0]))),
        "tsum": ([_rand(rng, (3, 4))], lambda ts: T.tsum(T.square(T.tsum(ts[0], axis=0)))),
        "mean": ([_rand(rng, (3, 4))], lambda ts: T.square(T.mean(ts[0]))),
        "layer_norm": ([_rand(rng, (3, 8))], lambda ts: T.tsum(T.square(T.layer_norm(ts[0])))),
        "reshape": ([_rand(rng, (3, 4))], lambda ts: T.tsum(T.square(T.reshape(ts[0], (4, 3))))),
        "narrow": ([_rand(rng, (5, 4))], lambda ts: T.tsum(T.square(T.narrow(ts[0], 0, 1, 3)))),
        "gather_rows": ([_rand(rng, (4, 3))], lambda ts: T.tsum(T.square(T.gather_rows(ts[0], idx)))),
        "scatter_rows": ([_rand(rng, (3, 2))], lambda ts: T.tsum(T.square(T.scatter_rows(ts[0], uniq_idx, 5)))),
        "weighted_corner_gather": (
            [_rand(rng, (4, 3))],
            lambda ts: T.tsum(T.square(T.weighted_corner_gather(ts[0], corner_idx, corner_w))),
        ),
        "weight_sum": (
            [_rand(rng, (2, 5)), _rand(rng, (2, 5, 3))],
            lambda ts: T.tsum(T.square(T.weight_sum(ts[0], ts[1]))),
        ),
        "cumsum_exclusive": ([_rand(rng, (2, 6))], lambda ts: T.tsum(T.square(T.cumsum_exclusive(ts[0])))),
        "conv2d": (
            [_rand(rng, (2, 5, 6)), _rand(rng, (3, 2, 3, 3)), _rand(rng, (3,))],
            lambda ts: T.tsum(T.square(T.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1))),
        ),
        "pixel_shuffle2": ([_rand(rng, (8, 3, 4))], lambda ts: T.tsum(T.square(T.pixel_shuffle2(ts[0])))),
        "upsample_nearest": ([_rand(rng, (2, 3, 4))], lambda ts: T.tsum(T.square(T.upsample_nearest(ts[0], 2)))),
        "broadcast_spatial": ([_rand(rng, (3,))], lambda ts: T.tsum(T.square(T.broadcast_spatial(ts[0], 2, 5)))),
        "to_chw": ([_rand(rng, (12, 3))], lambda ts: T.tsum(T.square(T.to_chw(ts[0], 3, 4)))),
        "offset_linear": (
            [_rand(rng, (3, 2)), _rand(rng, (3, 2, 4)), _rand(rng, (4,))],
            lambda ts: T.tsum(T.square(T.offset_linear(ts[0], ts[1], ts[2], pairs, 4))),
        ),
    }


@pytest.mark.parametrize("op_name", T.DIFFERENTIABLE_OPS)
def test_finite_difference_per_op(op_name):
    rng = np.random.default_rng(hash(op_name) % (2**32))
    cases = _op_cases(rng)
    assert op_name in cases, f"no finite-difference case for {op_name}"
    inputs, f = cases[op_name]
    err = grad_check(f, inputs, h=1e-3)
    assert err < 1e-4, f"{op_name}: rel err {err:.3e}"


def test_registry_matches_cases():
    rng = np.random.default_rng(0)
    assert set(_op_cases(rng)) == set(T.DIFFERENTIABLE_OPS)


def test_conv2d_matches_direct_computation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for co in range(3):
        for i in range(4):
            for j in range(5):
                ref[co, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * w[co]) + b[co]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_stride2_shape():
    x = Tensor(np.zeros((2, 8, 8)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    b = Tensor(np.zeros(4))
    assert T.conv2d(x, w, b, stride=2, padding=1).shape == (4, 4, 4)


def test_pixel_shuffle2_layout():
    x = np.arange(16.0).reshape(4, 2, 2)
    y = T.pixel_shuffle2(Tensor(x)).value
    assert y.shape == (1, 4, 4)
    # out[0, 2y+dy, 2x+dx] = in[2*dy+dx, y, x]
    for yy in range(2):
        for xx in range(2):
            for dy in range(2):
                for dx in range(2):
                    assert y[0, 2 * yy + dy, 2 * xx + dx] == x[2 * dy + dx, yy, xx]


def test_cumsum_exclusive_values():
    x = Tensor([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(T.cumsum_exclusive(x).value, [[0.0, 1.0, 3.0]])


def test_gather_rows_duplicate_accumulation():
    x = Tensor(np.eye(3), requires_grad=True)
    y = T.gather_rows(x, np.array([1, 1]))
    backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad[1], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0, 0.0])


def test_requires_grad_pruning():
    a = Tensor([1.0, 2.0])
    b = T.mul(a, a)
    assert not b.requires_grad and b._vjp is None


def test_grad_check_end_to_end_composite():
    rng = np.random.default_rng(7)

    def f(ts):
        h = T.relu(T.matmul(ts[0], ts[1]))
        h = T.layer_norm(h)
        return T.tsum(T.sigmoid(h))

    err = grad_check(f, [_rand(rng, (4, 5)), _rand(rng, (5, 6))], h=1e-3)
    assert err < 1e-3
