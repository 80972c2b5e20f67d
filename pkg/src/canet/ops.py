"""Differentiable operations.

Every function takes and returns :class:`~canet.tensor.Tensor` values,
runs the forward computation in numpy (convolutions through the kernel
backend), and registers a backward rule on the active tape. Feature
maps are NCHW; the second operand of elementwise ops may broadcast to
the first (never the other way around).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, check_same_dtype, record


def _result(data: np.ndarray) -> Tensor:
    return Tensor(data, dtype=data.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` over the axes along which `shape` was broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_second_broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    if b.data.ndim > a.data.ndim:
        raise ShapeError(f"{op}: second operand rank {b.data.ndim} exceeds first {a.data.ndim}")
    for sa, sb in zip(a.shape[::-1], b.shape[::-1]):
        if sb != sa and sb != 1:
            raise ShapeError(f"{op}: shape {b.shape} does not broadcast to {a.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    check_same_dtype(a, b)
    _check_second_broadcastable(a, b, "add")
    out = _result(a.data + b.data)

    def rule(g):
        return [g, _unbroadcast(g, b.shape) if b.requires_grad else None]

    return record(out, [a, b], rule)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    check_same_dtype(a, b)
    _check_second_broadcastable(a, b, "sub")
    out = _result(a.data - b.data)

    def rule(g):
        return [g, -_unbroadcast(g, b.shape) if b.requires_grad else None]

    return record(out, [a, b], rule)


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    check_same_dtype(a, b)
    _check_second_broadcastable(a, b, "mul")
    ad, bd = a.data, b.data
    out = _result(ad * bd)

    def rule(g):
        ga = g * bd if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return [ga, gb]

    return record(out, [a, b], rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = _result(ad @ bd)

    def rule(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return [ga, gb]

    return record(out, [a, b], rule)


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map: x[N×C] · w[C×C'] (+ b[C'])."""
    check_same_dtype(x, w, *([b] if b is not None else []))
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"fully_connected: bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data
    out = _result(y)
    inputs = [x, w] if b is None else [x, w, b]

    def rule(g):
        grads = [
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads

    return record(out, inputs, rule)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    x_shape = x.shape
    out = _result(x.data.reshape(shape))

    def rule(g):
        return [g.reshape(x_shape)]

    return record(out, [x], rule)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    check_same_dtype(*tensors)
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(first) or t.shape[:1] + t.shape[2:] != first[:1] + first[2:]:
            raise ShapeError(
                f"concat_channels: non-channel extents differ: {first} vs {t.shape}"
            )
    out = _result(np.concatenate([t.data for t in tensors], axis=1))
    widths = [t.shape[1] for t in tensors]

    def rule(g):
        grads, start = [], 0
        for t, c in zip(tensors, widths):
            grads.append(g[:, start : start + c] if t.requires_grad else None)
            start += c
        return grads

    return record(out, list(tensors), rule)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] invalid for {c} channels")
    out = _result(np.ascontiguousarray(x.data[:, start:stop]))
    x_shape, x_dtype = x.shape, x.data.dtype

    def rule(g):
        dx = np.zeros(x_shape, dtype=x_dtype)
        dx[:, start:stop] = g
        return [dx]

    return record(out, [x], rule)


def sum_all(x: Tensor) -> Tensor:
    out = _result(x.data.sum())
    x_shape, x_dtype = x.shape, x.data.dtype

    def rule(g):
        return [np.full(x_shape, g, dtype=x_dtype)]

    return record(out, [x], rule)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = _result(np.maximum(xd, 0))

    def rule(g):
        return [g * (xd > 0)]

    return record(out, [x], rule)


def relu6(x: Tensor) -> Tensor:
    xd = x.data
    out = _result(np.clip(xd, 0, 6))

    def rule(g):
        return [g * ((xd > 0) & (xd < 6))]

    return record(out, [x], rule)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    out = _result(s)

    def rule(g):
        return [g * s * (1.0 - s)]

    return record(out, [x], rule)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, numerically stabilized by max subtraction."""
    xd = x.data
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _result(s)

    def rule(g):
        return [s * (g - (g * s).sum(axis=1, keepdims=True))]

    return record(out, [x], rule)


# ---------------------------------------------------------------------------
# pooling


def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected N×C×H×W input, got shape {x.shape}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = _result(x.data.mean(axis=(2, 3), keepdims=True))

    def rule(g):
        return [np.broadcast_to(g / (h * w), (n, c, h, w))]

    return record(out, [x], rule)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max per channel; gradient routes to the first argmax in row-major order."""
    _check_nchw(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = _result(np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1))
    x_dtype = x.data.dtype

    def rule(g):
        dflat = np.zeros((n, c, h * w), dtype=x_dtype)
        np.put_along_axis(dflat, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        return [dflat.reshape(n, c, h, w)]

    return record(out, [x], rule)


def max_pool2d(x: Tensor, kernel: tuple, stride: tuple, padding: tuple = (0, 0)) -> Tensor:
    """Windowed spatial max; ties break to the first window element in row-major order."""
    _check_nchw(x, "max_pool2d")
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than padded input {x.shape}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    windows = np.empty((n, c, kh * kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            windows[:, :, i * kw + j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    arg = windows.argmax(axis=2)
    out = _result(np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0])
    x_dtype = x.data.dtype

    def rule(g):
        dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x_dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * (
                    arg == i * kw + j
                )
        if ph or pw:
            dxp = dxp[:, :, ph : ph + h, pw : pw + w]
        return [np.ascontiguousarray(dxp)]

    return record(out, [x], rule)


# ---------------------------------------------------------------------------
# convolutions


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=(1, 1),
    padding=(0, 0),
    groups: int = 1,
) -> Tensor:
    """Cross-correlation of x[N×C×H×W] with w[Cout×C/groups×kh×kw]."""
    check_same_dtype(x, w, *([b] if b is not None else []))
    _check_nchw(x, "conv2d")
    stride, padding = _pair(stride), _pair(padding)
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if cout % groups or c != cg * groups:
        raise ShapeError(
            f"conv2d: input channels {c} incompatible with weight {w.shape} and groups={groups}"
        )
    if kh > h + 2 * padding[0] or kw > wd + 2 * padding[1]:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input {x.shape}")
    y = kernels.conv2d_forward(x.data, w.data, stride, padding, groups)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        y = y + b.data.reshape(1, cout, 1, 1)
    out = _result(y)
    inputs = [x, w] if b is None else [x, w, b]
    xd, wdat, x_shape, w_shape = x.data, w.data, x.shape, w.shape

    def rule(g):
        g = np.ascontiguousarray(g)
        grads = [
            kernels.conv2d_backward_input(g, wdat, x_shape, stride, padding, groups)
            if x.requires_grad
            else None,
            kernels.conv2d_backward_weight(xd, g, w_shape, stride, padding, groups)
            if w.requires_grad
            else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    return record(out, inputs, rule)


def transposed_conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=(1, 1),
    padding=(0, 0),
) -> Tensor:
    """Adjoint of conv2d: x[N×Cin×H×W], w[Cin×Cout×kh×kw] → N×Cout×H'×W'.

    H' = (H−1)·sh − 2ph + kh. The forward pass IS the conv gradient-of-input
    operator, so its own backward rules are the conv forward (for dx) and the
    conv weight gradient with the roles of input and output swapped (for dw).
    """
    check_same_dtype(x, w, *([b] if b is not None else []))
    _check_nchw(x, "transposed_conv2d")
    stride, padding = _pair(stride), _pair(padding)
    n, c, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"transposed_conv2d: input channels {c} != weight Cin {cin}")
    ho = (h - 1) * stride[0] - 2 * padding[0] + kh
    wo = (wd - 1) * stride[1] - 2 * padding[1] + kw
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"transposed_conv2d: non-positive output extent ({ho},{wo}) "
            f"for input {x.shape}, kernel ({kh},{kw}), stride {stride}, padding {padding}"
        )
    y = kernels.conv2d_backward_input(x.data, w.data, (n, cout, ho, wo), stride, padding, 1)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"transposed_conv2d: bias shape {b.shape} != ({cout},)")
        y = y + b.data.reshape(1, cout, 1, 1)
    out = _result(y)
    inputs = [x, w] if b is None else [x, w, b]
    xd, wdat, w_shape = x.data, w.data, w.shape

    def rule(g):
        g = np.ascontiguousarray(g)
        grads = [
            kernels.conv2d_forward(g, wdat, stride, padding, 1) if x.requires_grad else None,
            kernels.conv2d_backward_weight(g, xd, w_shape, stride, padding, 1)
            if w.requires_grad
            else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    return record(out, inputs, rule)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Learnables, running statistics and mode for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    num_batches: int = field(default=0)


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel over (N,H,W), then scale-shift by gamma/beta.

    Train mode uses batch statistics and updates the running estimates by
    `momentum` (running variance stored unbiased, matching the usual
    framework convention). Eval mode is a per-channel affine map using the
    running statistics only.
    """
    _check_nchw(x, "batch_norm")
    n, c, h, w = x.shape
    gamma, beta = state.gamma, state.beta
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    if state.mode not in ("train", "eval"):
        raise ContractError(f"batch_norm: unknown mode {state.mode!r}")
    xd = x.data
    gsh = (1, c, 1, 1)

    if state.mode == "eval":
        if state.running_mean is None or state.running_var is None:
            raise ContractError(
                "batch_norm: eval mode requires running statistics "
                "(none recorded and none explicitly provided)"
            )
        inv = (1.0 / np.sqrt(state.running_var.astype(xd.dtype) + state.eps)).reshape(gsh)
        xhat = (xd - state.running_mean.astype(xd.dtype).reshape(gsh)) * inv
        out = _result(gamma.data.reshape(gsh) * xhat + beta.data.reshape(gsh))

        def eval_rule(g):
            return [
                g * (gamma.data.reshape(gsh) * inv) if x.requires_grad else None,
                (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                g.sum(axis=(0, 2, 3)) if beta.requires_grad else None,
            ]

        return record(out, [x, gamma, beta], eval_rule)

    cnt = n * h * w
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(gsh)) * inv.reshape(gsh)
    out = _result(gamma.data.reshape(gsh) * xhat + beta.data.reshape(gsh))

    unbiased = var * (cnt / (cnt - 1)) if cnt > 1 else var
    if state.running_mean is None:
        state.running_mean = np.zeros(c, dtype=np.float64)
        state.running_var = np.ones(c, dtype=np.float64)
    m = state.momentum
    state.running_mean += m * (mean.astype(np.float64) - state.running_mean)
    state.running_var += m * (unbiased.astype(np.float64) - state.running_var)
    state.num_batches += 1

    def train_rule(g):
        gvec = gamma.data.reshape(gsh)
        dxhat = g * gvec
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if x.requires_grad:
            # Closed-form batch-norm input gradient.
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv.reshape(gsh) / cnt) * (
                cnt * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
            )
        else:
            dx = None
        return [dx, dgamma, dbeta]

    return record(out, [x, gamma, beta], train_rule)


# ---------------------------------------------------------------------------
# interpolation


def _interp_axis(size: int, factor: int):
    """Source taps for align-corners-false bilinear resize of one axis."""
    dst = np.arange(size * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    t = src - i0
    return i0, i1, t


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear ×factor upsampling, align-corners-false convention."""
    _check_nchw(x, "bilinear_upsample")
    if factor < 1:
        raise ShapeError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    r0, r1, tr = _interp_axis(h, factor)
    c0, c1, tc = _interp_axis(w, factor)
    dt = x.data.dtype
    trc = tr.astype(dt).reshape(1, 1, -1, 1)
    tcc = tc.astype(dt).reshape(1, 1, 1, -1)

    rows = x.data[:, :, r0, :] * (1 - trc) + x.data[:, :, r1, :] * trc
    out = _result(rows[:, :, :, c0] * (1 - tcc) + rows[:, :, :, c1] * tcc)

    def rule(g):
        drows = np.zeros((n, c, h * factor, w), dtype=dt)
        np.add.at(drows, (slice(None), slice(None), slice(None), c0), g * (1 - tcc))
        np.add.at(drows, (slice(None), slice(None), slice(None), c1), g * tcc)
        dx = np.zeros((n, c, h, w), dtype=dt)
        np.add.at(dx, (slice(None), slice(None), r0, slice(None)), drows * (1 - trc))
        np.add.at(dx, (slice(None), slice(None), r1, slice(None)), drows * trc)
        return [dx]

    return record(out, [x], rule)
