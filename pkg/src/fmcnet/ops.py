"""Differentiable primitives.

Conventions:
  * feature maps are [C, D, H, W]; flattened sequences are [L, C];
    the "channel axis" is axis 0 for maps and axis 1 for sequences,
  * everything is float64; reductions use a fixed summation order so
    repeated runs are bit-identical,
  * each primitive validates shapes up front and raises ShapeError naming
    the offending axis.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .autodiff import ShapeError, Tensor, make_result

EPS_NORM = 1e-5


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _channel_axis(x: Tensor) -> int:
    if x.ndim == 4:
        return 0
    if x.ndim == 2:
        return 1
    raise ShapeError(f"expected a [C,D,H,W] map or [L,C] sequence, got ndim={x.ndim}")


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_result(data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_result(data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return make_result(data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    # the finite check is the guard; silence numpy's pre-warning on 0 divisors
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * data / b.data, b.data.shape),
        )

    return make_result(data, (a, b), vjp, "div")


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)

    def vjp(g):
        return (alpha * g,)

    return make_result(alpha * x.data, (x,), vjp, "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g,)

    return make_result(x.data + float(c), (x,), vjp, "add_scalar")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def vjp(g):
        return (g * data,)

    return make_result(data, (x,), vjp, "exp")


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_data(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return make_result(data, (x,), vjp, "sigmoid")


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_data(x.data)
    data = x.data * s

    def vjp(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return make_result(data, (x,), vjp, "silu")


def softplus(x: Tensor) -> Tensor:
    data = np.logaddexp(0.0, x.data)
    s = _sigmoid_data(x.data)

    def vjp(g):
        return (g * s,)

    return make_result(data, (x,), vjp, "softplus")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.ndim), x.data.shape),)
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return (np.broadcast_to(g, x.data.shape),)

    return make_result(data, (x,), vjp, "sum")


# ---------------------------------------------------------------------------
# layout

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return make_result(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def vjp(g):
        return (g.transpose(inverse),)

    return make_result(x.data.transpose(axes), (x,), vjp, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return make_result(data, tuple(parts), vjp, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.data.shape[axis]):
        raise ShapeError(
            f"narrow: range [{start}, {start + length}) exceeds axis {axis} of extent {x.data.shape[axis]}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_result(x.data[index], (x,), vjp, "narrow")


# ---------------------------------------------------------------------------
# channel mixing

def pointwise_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply a [C_out, C_in] map independently at every position of [..., C_in]."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeError(
            f"pointwise_linear: trailing channel axis has {x.data.shape[-1]} channels, "
            f"weight expects {weight.data.shape[1]}"
        )
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ShapeError("pointwise_linear: bias shape must be [C_out]")
        data = data + bias.data

    def vjp(g):
        g2 = g.reshape(-1, weight.data.shape[0])
        x2 = x.data.reshape(-1, weight.data.shape[1])
        gx = (g2 @ weight.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(data, parents, vjp, "pointwise_linear")


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1x1 channel mixing on a [C_in, D, H, W] map."""
    if x.ndim != 4:
        raise ShapeError(f"channel_linear: expected [C,D,H,W], got ndim={x.ndim}")
    if x.data.shape[0] != weight.data.shape[1]:
        raise ShapeError(
            f"channel_linear: channel axis has {x.data.shape[0]} channels, "
            f"weight expects {weight.data.shape[1]}"
        )
    data = np.tensordot(weight.data, x.data, axes=([1], [0]))
    if bias is not None:
        data = data + bias.data[:, None, None, None]

    def vjp(g):
        gx = np.tensordot(weight.data.T, g, axes=([1], [0]))
        gw = np.tensordot(g, x.data, axes=([1, 2, 3], [1, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(data, parents, vjp, "channel_linear")


# ---------------------------------------------------------------------------
# normalization / softmax

def softmax_channels(x: Tensor) -> Tensor:
    axis = _channel_axis(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return make_result(data, (x,), vjp, "softmax_channels")


def log_softmax_channels(x: Tensor) -> Tensor:
    axis = _channel_axis(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return make_result(data, (x,), vjp, "log_softmax_channels")


def layer_norm_channels(x: Tensor) -> Tensor:
    """Zero-mean unit-variance over the channel axis at each position."""
    axis = _channel_axis(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = np.square(x.data - mu).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS_NORM)
    data = (x.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gp = (g * data).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - data * gp),)

    return make_result(data, (x,), vjp, "layer_norm_channels")


def group_norm(x: Tensor, n_groups: int) -> Tensor:
    """Normalize a [C,D,H,W] map over channel groups and space."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected [C,D,H,W], got ndim={x.ndim}")
    c = x.data.shape[0]
    if n_groups < 1 or c % n_groups != 0:
        raise ShapeError(f"group_norm: {n_groups} groups do not divide {c} channels")
    grouped = x.data.reshape(n_groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = np.square(grouped - mu).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS_NORM)
    xhat = (grouped - mu) * inv
    data = xhat.reshape(x.data.shape)

    def vjp(g):
        gg = g.reshape(n_groups, -1)
        gm = gg.mean(axis=1, keepdims=True)
        gp = (gg * xhat).mean(axis=1, keepdims=True)
        return ((inv * (gg - gm - xhat * gp)).reshape(x.data.shape),)

    return make_result(data, (x,), vjp, "group_norm")


# ---------------------------------------------------------------------------
# convolution

def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: str = "same",
) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv3d: input must be [C,D,H,W], got ndim={x.ndim}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [C_out,C_in/groups,k,k,k], got ndim={weight.ndim}")
    c_in = x.data.shape[0]
    c_out, cig, k = weight.data.shape[0], weight.data.shape[1], weight.data.shape[2]
    if weight.data.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic, got {weight.data.shape[2:]}")
    if k % 2 != 1:
        raise ShapeError(f"conv3d: kernel extent must be odd, got {k}")
    if dilation < 1 or stride < 1:
        raise ShapeError("conv3d: stride and dilation must be >= 1")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ShapeError(
            f"conv3d: groups={groups} must divide input channel axis ({c_in}) "
            f"and output channel axis ({c_out})"
        )
    if cig != c_in // groups:
        raise ShapeError(
            f"conv3d: input channel axis has {c_in} channels but kernel expects "
            f"{cig * groups} (kernel axis 1 = {cig}, groups={groups})"
        )
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv3d: padding must be 'same' or 'valid', got {padding!r}")
    pad = dilation * (k - 1) // 2 if padding == "same" else 0
    span = dilation * (k - 1) + 1
    out_sp = []
    for ax, name in zip((1, 2, 3), ("depth", "height", "width")):
        padded = x.data.shape[ax] + 2 * pad
        if padded < span:
            raise ShapeError(
                f"conv3d: {name} axis extent {x.data.shape[ax]} is smaller than the "
                f"kernel span {span} under {padding} padding"
            )
        out_sp.append((padded - span) // stride + 1)

    xpad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    out = np.empty((c_out, *out_sp))
    backend.conv3d_fwd(xpad, np.ascontiguousarray(weight.data), stride, dilation, groups, out)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError("conv3d: bias shape must be [C_out]")
        out = out + bias.data[:, None, None, None]

    def vjp(g):
        g = np.ascontiguousarray(g)
        gxpad = np.zeros_like(xpad)
        backend.conv3d_bwd_x(np.ascontiguousarray(weight.data), g, stride, dilation, groups, gxpad)
        gx = gxpad[:, pad : pad + x.data.shape[1], pad : pad + x.data.shape[2], pad : pad + x.data.shape[3]]
        gw = np.empty_like(weight.data)
        backend.conv3d_bwd_w(xpad, g, stride, dilation, groups, gw)
        if bias is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(1, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, vjp, "conv3d")


# ---------------------------------------------------------------------------
# pooling / resampling

def group_pool(x: Tensor, n_groups: int, mode: str) -> Tensor:
    """Pool contiguous channel ranges of a [C,D,H,W] map down to one channel each."""
    if x.ndim != 4:
        raise ShapeError(f"group_pool: expected [C,D,H,W], got ndim={x.ndim}")
    c = x.data.shape[0]
    if n_groups < 1 or c % n_groups != 0:
        raise ShapeError(f"group_pool: {n_groups} groups do not divide {c} channels")
    if mode not in ("max", "avg"):
        raise ShapeError(f"group_pool: mode must be 'max' or 'avg', got {mode!r}")
    csz = c // n_groups
    view = x.data.reshape(n_groups, csz, *x.data.shape[1:])
    if mode == "max":
        idx = view.argmax(axis=1)
        data = np.take_along_axis(view, idx[:, None], axis=1)[:, 0]

        def vjp(g):
            gv = np.zeros_like(view)
            np.put_along_axis(gv, idx[:, None], g[:, None], axis=1)
            return (gv.reshape(x.data.shape),)

    else:
        data = view.mean(axis=1)

        def vjp(g):
            gv = np.broadcast_to(g[:, None] / csz, view.shape)
            return (gv.reshape(x.data.shape),)

    return make_result(data, (x,), vjp, "group_pool")


def maxpool2x(x: Tensor) -> Tensor:
    """2x2x2 stride-2 max pooling of a [C,D,H,W] map with even extents."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x: expected [C,D,H,W], got ndim={x.ndim}")
    c, d, hh, ww = x.data.shape
    for ax, name in zip((1, 2, 3), ("depth", "height", "width")):
        if x.data.shape[ax] % 2 != 0:
            raise ShapeError(f"maxpool2x: {name} axis extent {x.data.shape[ax]} is odd")
    windows = (
        x.data.reshape(c, d // 2, 2, hh // 2, 2, ww // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // 2, hh // 2, ww // 2, 8)
    )
    idx = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (
            gw.reshape(c, d // 2, hh // 2, ww // 2, 2, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(x.data.shape)
            .copy(),
        )

    return make_result(data, (x,), vjp, "maxpool2x")


def _upsample_axis_plan(n: int):
    # Output position o samples source coordinate (o + 0.5)/2 - 0.5,
    # linearly interpolated with edge clamping.
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    return i0c, i1c, 1.0 - frac, frac


def upsample_trilinear2x(x: Tensor) -> Tensor:
    """Double every spatial extent of a [C,D,H,W] map by trilinear interpolation."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_trilinear2x: expected [C,D,H,W], got ndim={x.ndim}")
    plans = [_upsample_axis_plan(x.data.shape[ax]) for ax in (1, 2, 3)]

    def apply_axis(arr, ax, plan):
        i0, i1, w0, w1 = plan
        a0 = np.take(arr, i0, axis=ax)
        a1 = np.take(arr, i1, axis=ax)
        wshape = [1] * arr.ndim
        wshape[ax] = len(i0)
        return a0 * w0.reshape(wshape) + a1 * w1.reshape(wshape)

    data = x.data
    for ax, plan in zip((1, 2, 3), plans):
        data = apply_axis(data, ax, plan)

    def vjp(g):
        for ax, plan in zip((3, 2, 1), reversed(plans)):
            i0, i1, w0, w1 = plan
            wshape = [1] * g.ndim
            wshape[ax] = len(i0)
            n_in = x.data.shape[ax]
            shape = list(g.shape)
            shape[ax] = n_in
            acc = np.zeros(shape)
            gm = np.moveaxis(acc, ax, 0)
            np.add.at(gm, i0, np.moveaxis(g * w0.reshape(wshape), ax, 0))
            np.add.at(gm, i1, np.moveaxis(g * w1.reshape(wshape), ax, 0))
            g = acc
        return (g,)

    return make_result(data, (x,), vjp, "upsample_trilinear2x")


# ---------------------------------------------------------------------------
# selective-scan core

def state_scan(u: Tensor, delta: Tensor, bmat: Tensor, cmat: Tensor, decay: Tensor, skip: Tensor) -> Tensor:
    """Input-dependent linear state recurrence over a [L,C] sequence.

    h[t] = exp(-delta[t,c] * decay[c,n]) * h[t-1] + (delta[t,c] * u[t,c]) * bmat[t,n]
    y[t,c] = <cmat[t], h[t,c]> + skip[c] * u[t,c],   h before t=0 is zero.
    """
    L, C = u.data.shape
    N = decay.data.shape[1]
    if delta.data.shape != (L, C):
        raise ShapeError(f"state_scan: delta must be [L,C]={L, C}, got {delta.data.shape}")
    if bmat.data.shape != (L, N) or cmat.data.shape != (L, N):
        raise ShapeError(f"state_scan: input/readout sequences must be [L,N]=({L},{N})")
    if decay.data.shape != (C, N) or skip.data.shape != (C,):
        raise ShapeError("state_scan: decay must be [C,N] and skip [C]")
    ud = np.ascontiguousarray(u.data)
    dd = np.ascontiguousarray(delta.data)
    bd = np.ascontiguousarray(bmat.data)
    cd = np.ascontiguousarray(cmat.data)
    decd = np.ascontiguousarray(decay.data)
    skd = np.ascontiguousarray(skip.data)
    y = np.empty((L, C))
    h = np.empty((L, C, N))
    backend.scan_fwd(ud, dd, bd, cd, decd, skd, y, h)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gu = np.zeros_like(ud)
        gdelta = np.zeros_like(dd)
        gb = np.zeros_like(bd)
        gc = np.zeros_like(cd)
        gdecay = np.zeros_like(decd)
        gskip = np.zeros_like(skd)
        backend.scan_bwd(ud, dd, bd, cd, decd, skd, h, g, gu, gdelta, gb, gc, gdecay, gskip)
        return gu, gdelta, gb, gc, gdecay, gskip

    return make_result(y, (u, delta, bmat, cmat, decay, skip), vjp, "state_scan")


# ---------------------------------------------------------------------------
# operator sugar

Tensor.__add__ = add
Tensor.__sub__ = sub
Tensor.__mul__ = mul
Tensor.__neg__ = lambda self: scale(self, -1.0)
Tensor.sum = reduce_sum
Tensor.reshape = reshape
