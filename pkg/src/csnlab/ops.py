"""Differentiable primitive operations.

All ops take Tensors (or array-likes, coerced to constants), validate shapes,
compute the forward value with numpy, and register a backward rule on the
active tape via ``autodiff.record``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, counters, record
from .errors import ShapeError


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar without creating a constant tensor."""
    a = as_tensor(a)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks must be 1 or 2, got {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if a.ndim == 2 and b.ndim == 2:
            return g @ bd.T, ad.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # 1-D dot product

    return record("matmul", out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {a.shape}")
    return record("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", out, tuple(ts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def bwd(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return record("narrow", out, (a,), bwd)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: need 2-D table and 1-D indices, got {table.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return record("gather_rows", out, (table,), bwd)


def _sum_impl(op, a, axis, keepdims):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record(op, np.asarray(out), (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return _sum_impl("sum", a, axis, keepdims)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(_sum_impl("sum", a, axis, keepdims), 1.0 / n)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    # Subgradient at 0 is taken as 0.
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return record("log", y, (a,), lambda g: (g / a.data,))


def texp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return record("sqrt", y, (a,), lambda g: (g / (2.0 * y),))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > floor
    return record("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed max-subtracted for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", y, (a,), bwd)


def stop_gradient(a) -> Tensor:
    """Barrier: value passes through, gradients upstream are exactly zero."""
    a = as_tensor(a)
    return Tensor(a.data)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call sites skip it entirely outside training."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ShapeError("dropout: rate must be < 1")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return record("dropout", a.data * mask, (a,), lambda g: (g * mask,))


CE_EPS = 1e-12


def cross_entropy(probs, target, _sum_check_tol: float = 1e-6) -> Tensor:
    """Cross entropy -sum(y * log p) against one-hot targets.

    Accepts a single distribution (C,) or a batch (B, C); batches reduce by
    summation.  When ``probs`` came straight out of a softmax node, the
    backward rule is fused through it so the gradient at the logits is
    computed as (p - y) directly, avoiding the -y/p blow-up for small p.
    Zero probability at the target index is clamped to 1e-12 and counted in
    ``counters.ce_clamps``.
    """
    probs = as_tensor(probs)
    target = as_tensor(target)
    if probs.shape != target.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs target {target.shape}")
    if probs.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy: expected rank 1 or 2, got {probs.shape}")
    p = probs.data
    y = target.data
    if np.any(p < 0):
        raise ShapeError("cross_entropy: probabilities must be nonnegative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _sum_check_tol):
        raise ShapeError("cross_entropy: probabilities do not sum to 1")
    if not np.array_equal(y, y.astype(bool).astype(np.float64)) or np.any(
        y.sum(axis=-1) != 1.0
    ):
        raise ShapeError("cross_entropy: target must be one-hot")

    p_at_target = (p * y).sum(axis=-1)
    n_clamped = int(np.count_nonzero(p_at_target < CE_EPS))
    if n_clamped:
        counters.ce_clamps += n_clamped
        p_at_target = np.maximum(p_at_target, CE_EPS)
    value = np.asarray(-np.log(p_at_target).sum())

    src = probs.node
    if src is not None and src.op == "softmax":
        logits = src.inputs[0]

        def bwd_fused(g):
            return (g * (p - y),)

        return record("cross_entropy", value, (logits,), bwd_fused)

    def bwd(g):
        return (g * (-y / np.maximum(p, CE_EPS)),)

    return record("cross_entropy", value, (probs,), bwd)


# ---------------------------------------------------------------------------
# 2-D convolution and pooling (explicit patch-matrix expansion; inputs are
# small enough that clarity wins over speed).

_PATCH_CACHE: dict = {}


def _patch_indices(h: int, w: int, kh: int, kw: int):
    """Row/col index arrays mapping padded-image pixels to patch positions."""
    key = (h, w, kh, kw)
    cached = _PATCH_CACHE.get(key)
    if cached is not None:
        return cached
    out_i, out_j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ki, kj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    ii = ki.reshape(-1, 1) + out_i.reshape(1, -1)  # (kh*kw, h*w)
    jj = kj.reshape(-1, 1) + out_j.reshape(1, -1)
    _PATCH_CACHE[key] = (ii, jj)
    return ii, jj


def _im2col(data: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*kh*kw, H*W) patch matrix, same padding."""
    b, c, h, w = data.shape
    ph, pw = kh // 2, kw // 2
    xpad = np.pad(data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ii, jj = _patch_indices(h, w, kh, kw)
    # advanced indexing yields (B, C, kh*kw, H*W); the reshape is free
    return xpad[:, :, ii, jj].reshape(b, c * kh * kw, h * w)


def _conv_forward(data: np.ndarray, kdata: np.ndarray):
    b, c, h, w = data.shape
    f, _, kh, kw = kdata.shape
    cols = _im2col(data, kh, kw)  # (B, C*kh*kw, H*W)
    out = np.matmul(kdata.reshape(f, -1), cols)  # batched GEMM -> (B, F, H*W)
    return out.reshape(b, f, h, w), cols


def conv2d(x, kernel) -> Tensor:
    """Same-padded stride-1 2-D convolution.

    x: (B, C, H, W); kernel: (F, C, kh, kw) with odd kh, kw.  The input
    gradient is itself a convolution with the spatially flipped,
    channel-swapped kernel, so both directions run as plain GEMMs.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need (B,C,H,W) and (F,C,kh,kw), got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: channel mismatch, input has {c}, kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel dims must be odd for same padding")
    out, cols = _conv_forward(x.data, kernel.data)

    def bwd(g):
        gl = g.reshape(b, f, h * w)
        gk = np.matmul(gl, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, F, kh, kw)
        gx, _ = _conv_forward(g, np.ascontiguousarray(kflip))
        return gx, gk

    return record("conv2d", out, (x, kernel), bwd)


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2, ceil mode (odd edges padded by -inf)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: need (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = x.data
    if h % 2 or w % 2:
        xp = np.pad(
            xp,
            ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
            constant_values=-np.inf,
        )
    windows = xp.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gp = gw.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        return (np.ascontiguousarray(gp[:, :, :h, :w]),)

    return record("maxpool2", out, (x,), bwd)
