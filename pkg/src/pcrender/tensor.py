"""Dense float64 arrays with reverse-mode automatic differentiation.

Every learnable quantity in the renderer is a :class:`Tensor` carrying a
value array and an accumulated gradient array of the same shape.  Operations
build a computation graph over a fixed op set; :func:`backward` walks the
graph once per call and *adds* into ``.grad`` (sum semantics, so two backward
passes without zeroing double the gradients).

Broadcasting is restricted to the leading-axis case: a ``(C,)`` operand may
combine with an ``(..., C)`` operand.  Anything else requires an explicit
reshape.  All computation is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "GradCheckError",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "cmul",
    "cadd",
    "matmul",
    "exp",
    "relu",
    "sigmoid",
    "softplus",
    "absval",
    "square",
    "tsum",
    "mean",
    "layer_norm",
    "reshape",
    "narrow",
    "gather_rows",
    "scatter_rows",
    "weighted_corner_gather",
    "weight_sum",
    "cumsum_exclusive",
    "conv2d",
    "pixel_shuffle2",
    "upsample_nearest",
    "broadcast_spatial",
    "to_chw",
    "offset_linear",
    "DIFFERENTIABLE_OPS",
]

# Ops with a registered vjp; the test suite runs a finite-difference check
# over every name listed here.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "cmul",
    "cadd",
    "matmul",
    "exp",
    "relu",
    "sigmoid",
    "softplus",
    "absval",
    "square",
    "tsum",
    "mean",
    "layer_norm",
    "reshape",
    "narrow",
    "gather_rows",
    "scatter_rows",
    "weighted_corner_gather",
    "weight_sum",
    "cumsum_exclusive",
    "conv2d",
    "pixel_shuffle2",
    "upsample_nearest",
    "broadcast_spatial",
    "to_chw",
    "offset_linear",
)


class Tensor:
    """A dense float64 array with an accumulated gradient of the same shape."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag}, requires_grad={self.requires_grad})"


def _node(value: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Create a graph node; drops the tape record if no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = np.zeros_like(value)
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def as_tensor(x) -> Tensor:
    """Lift an array-like to a constant Tensor (no-op on Tensors)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_leading_broadcast(a: np.ndarray, b: np.ndarray) -> bool:
    """True if b broadcasts against a over leading axes only (or shapes equal)."""
    if a.shape == b.shape:
        return True
    return b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape


def _reduce_leading(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the leading axes that were broadcast to reach shape."""
    if g.shape == shape:
        return g
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _check_leading_broadcast(a.value, b.value):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} need an explicit reshape")
    return _node(a.value + b.value, (a, b), lambda g: (g, _reduce_leading(g, b.value.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _check_leading_broadcast(a.value, b.value):
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} need an explicit reshape")
    return _node(a.value - b.value, (a, b), lambda g: (g, -_reduce_leading(g, b.value.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _check_leading_broadcast(a.value, b.value):
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} need an explicit reshape")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, _reduce_leading(g * av, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a Python scalar."""
    k = float(k)
    return _node(a.value * k, (a,), lambda g: (g * k,))


def shift(a: Tensor, k: float) -> Tensor:
    """Add a Python scalar."""
    return _node(a.value + float(k), (a,), lambda g: (g,))


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (no gradient to the constant)."""
    const = np.asarray(const, dtype=np.float64)
    return _node(a.value * const, (a,), lambda g: (g * const,))


def cadd(a: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise add a constant array."""
    const = np.asarray(const, dtype=np.float64)
    return _node(a.value + const, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# matmul and nonlinearities


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands; reshape explicitly")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def exp(a: Tensor) -> Tensor:
    ev = np.exp(a.value)
    return _node(ev, (a,), lambda g: (g * ev,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign for overflow safety.
    v = a.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    v = a.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _node(out, (a,), lambda g: (g * sig,))


def absval(a: Tensor) -> Tensor:
    sgn = np.sign(a.value)
    return _node(np.abs(a.value), (a,), lambda g: (g * sgn,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (g * (2.0 * av),))


# ---------------------------------------------------------------------------
# reductions and normalization


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = np.asarray(a.value.sum())
        return _node(out, (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _node(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.value.size)


def layer_norm(x: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along one axis.

    A constant input maps to zeros (the eps floor absorbs zero variance).
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    v = x.value
    n = v.shape[axis]
    mu = v.mean(axis=axis, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xc).mean(axis=axis, keepdims=True)
        dx = inv * (g - gm) - xc * (inv ** 3) * gxm
        return (dx,)

    return _node(y, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along one axis."""
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return _node(a.value[idx].copy(), (a,), vjp)


def to_chw(a: Tensor, h: int, w: int) -> Tensor:
    """Reinterpret row-major per-pixel rows (H*W, C) as a (C, H, W) map."""
    r, c = a.value.shape
    if r != h * w:
        raise ValueError(f"to_chw: {r} rows cannot form a {h}x{w} grid")
    out = a.value.reshape(h, w, c).transpose(2, 0, 1).copy()
    return _node(out, (a,), lambda g: (g.transpose(1, 2, 0).reshape(r, c),))


def broadcast_spatial(p: Tensor, h: int, w: int) -> Tensor:
    """Expand a per-channel vector (C,) to a constant (C, H, W) map."""
    out = np.broadcast_to(p.value[:, None, None], (p.value.shape[0], h, w)).copy()
    return _node(out, (p,), lambda g: (g.sum(axis=(1, 2)),))


# ---------------------------------------------------------------------------
# gather / scatter


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), vjp)


def scatter_rows(vals: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows into a zero (n_rows, C) tensor.  Indices must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + vals.value.shape[1:], dtype=np.float64)
    out[idx] = vals.value
    return _node(out, (vals,), lambda g: (g[idx],))


def weighted_corner_gather(feats: Tensor, idx: np.ndarray, wts: np.ndarray) -> Tensor:
    """Weighted sum of K gathered rows per query: out[s] = sum_k w[s,k] * F[idx[s,k]].

    idx entries of -1 denote absent rows and contribute a zero vector.
    """
    idx = np.asarray(idx, dtype=np.int64)
    wts = np.asarray(wts, dtype=np.float64)
    present = idx >= 0
    w_eff = np.where(present, wts, 0.0)
    idx_eff = np.where(present, idx, 0)
    fv = feats.value
    out = np.einsum("sk,skc->sc", w_eff, fv[idx_eff])

    def vjp(g):
        df = np.zeros_like(fv)
        contrib = w_eff[:, :, None] * g[:, None, :]
        np.add.at(df, idx_eff.ravel(), contrib.reshape(-1, fv.shape[1]))
        return (df,)

    return _node(out, (feats,), vjp)


def weight_sum(w: Tensor, f: Tensor) -> Tensor:
    """Per-ray weighted feature sum: (R, N) x (R, N, C) -> (R, C)."""
    wv, fv = w.value, f.value
    out = np.einsum("rn,rnc->rc", wv, fv)

    def vjp(g):
        dw = np.einsum("rc,rnc->rn", g, fv)
        df = wv[:, :, None] * g[:, None, :]
        return (dw, df)

    return _node(out, (w, f), vjp)


def cumsum_exclusive(a: Tensor, axis: int = -1) -> Tensor:
    """out[..., i] = sum of a[..., j] for j < i along the given axis."""
    v = a.value
    cs = np.cumsum(v, axis=axis)
    out = np.zeros_like(v)
    src = [slice(None)] * v.ndim
    dst = [slice(None)] * v.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = cs[tuple(src)]

    def vjp(g):
        # d/da[j] = sum of g over i > j: reversed exclusive cumsum.
        rev = [slice(None)] * v.ndim
        rev[axis] = slice(None, None, -1)
        rev = tuple(rev)
        gc = np.cumsum(g[rev], axis=axis)[rev]
        da = np.zeros_like(g)
        da[tuple(src)] = gc[tuple(dst)]
        return (da,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# 2-D convolution (single image, CHW layout)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride)
    )
    return view.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of a (Cin, H, W) map with (Cout, Cin, kh, kw) weights."""
    cin, h, wd = x.value.shape
    cout, cin_w, kh, kw = w.value.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, weights expect {cin_w}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.zeros((cin, hp, wp), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + wd] = x.value
    col = np.ascontiguousarray(_im2col(xp, kh, kw, stride, ho, wo))
    wm = w.value.reshape(cout, cin * kh * kw)
    out = (wm @ col + b.value[:, None]).reshape(cout, ho, wo)

    def vjp(g):
        gm = g.reshape(cout, ho * wo)
        dw = (gm @ col.T).reshape(w.value.shape)
        db = gm.sum(axis=1)
        dcol = (wm.T @ gm).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp), dtype=np.float64)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += dcol[:, ki, kj]
        dx = dxp[:, padding : padding + h, padding : padding + wd]
        return (dx, dw, db)

    return _node(out, (x, w, b), vjp)


def pixel_shuffle2(x: Tensor) -> Tensor:
    """Depth-to-space by 2: out[c, 2y+dy, 2x+dx] = in[4c + 2dy + dx, y, x]."""
    c4, h, w = x.value.shape
    if c4 % 4 != 0:
        raise ValueError("pixel_shuffle2 needs a channel count divisible by 4")
    c = c4 // 4
    out = x.value.reshape(c, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(c, 2 * h, 2 * w)

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).transpose(0, 2, 4, 1, 3).reshape(c4, h, w),)

    return _node(np.ascontiguousarray(out), (x,), vjp)


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    """Nearest-neighbor replication by an integer factor per spatial axis."""
    c, h, w = x.value.shape
    out = np.repeat(np.repeat(x.value, k, axis=1), k, axis=2)

    def vjp(g):
        return (g.reshape(c, h, k, w, k).sum(axis=(2, 4)),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# sparse 3-D convolution hook


def offset_linear(
    feats: Tensor,
    weight: Tensor,
    bias: Tensor,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    n_out: int,
) -> Tensor:
    """Gather-matmul-scatter over per-offset index pairs.

    For each kernel offset k with index pair (in_idx, out_idx):
    ``out[out_idx] += feats[in_idx] @ weight[k]``.  Within one offset both
    index arrays must be duplicate-free (guaranteed by unique voxel
    coordinates), which keeps the scatter collision-free.
    """
    k, cin, cout = weight.value.shape
    if len(pairs) != k:
        raise ValueError(f"offset_linear: {len(pairs)} index pairs for {k} kernel offsets")
    fv, wv = feats.value, weight.value
    out = np.zeros((n_out, cout), dtype=np.float64)
    for ki, (in_idx, out_idx) in enumerate(pairs):
        if in_idx.size:
            out[out_idx] += fv[in_idx] @ wv[ki]
    out += bias.value

    def vjp(g):
        df = np.zeros_like(fv)
        dw = np.zeros_like(wv)
        for ki, (in_idx, out_idx) in enumerate(pairs):
            if in_idx.size:
                go = g[out_idx]
                df[in_idx] += go @ wv[ki].T
                dw[ki] = fv[in_idx].T @ go
        db = g.sum(axis=0)
        return (df, dw, db)

    return _node(out, (feats, weight, bias), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(node) into .grad for every node reachable from output.

    output must be scalar (size 1).  Gradients add to whatever is already in
    .grad; call zero_grad on leaves between steps.
    """
    if output.value.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.value.shape}")

    # Iterative topological order over the recorded graph.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pass_grad: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(topo):
        g = pass_grad.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pass_grad:
                pass_grad[key] = pass_grad[key] + pg
            else:
                pass_grad[key] = pg


class GradCheckError(Exception):
    """A finite-difference comparison hit a NaN; carries the offending index."""

    def __init__(self, input_pos: int, flat_index: int, kind: str):
        self.input_pos = input_pos
        self.flat_index = flat_index
        super().__init__(f"grad_check: {kind} NaN at input {input_pos}, flat index {flat_index}")


def grad_check(f: Callable[[list[Tensor]], Tensor], inputs: list[Tensor], h: float = 1e-3) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns max over all input entries of |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = f(inputs)
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    max_err = 0.0
    for pos, t in enumerate(inputs):
        flat = t.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(inputs).value)
            flat[j] = orig - h
            fm = float(f(inputs).value)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            if np.isnan(numeric):
                raise GradCheckError(pos, j, "numeric")
            a = analytic[pos].reshape(-1)[j]
            if np.isnan(a):
                raise GradCheckError(pos, j, "analytic")
            err = abs(a - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
