"""Differentiable primitives over :class:`~d2aunet.tensor.Tensor`.

Layout is (batch, channel, height, width) for every spatial op. The only
implicit broadcasting allowed is an attention map of shape (B, C, 1, 1) or
(B, 1, H, W) against a (B, C, H, W) feature, plus Python scalars.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# cost accounting

_mac_counter: list[int] | None = None


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Accumulate multiply-accumulates of conv2d/linear calls made inside the block.

    Yields a one-element list whose entry is the running total.
    """
    global _mac_counter
    prev = _mac_counter
    _mac_counter = [0]
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


def _add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


# --------------------------------------------------------------------------
# elementwise


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 4 and len(b) == 4:
        big, small = (a, b) if np.prod(a) >= np.prod(b) else (b, a)
        B, C, H, W = big
        if small in ((B, C, 1, 1), (B, 1, H, W)):
            return big
    raise ShapeError(
        f"illegal broadcast between {a} and {b}: only (B,C,1,1) or (B,1,H,W) "
        "attention maps may broadcast against (B,C,H,W)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        return make_result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    if not isinstance(b, Tensor):
        return add(a, -b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = b
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel by default); other extents must agree."""
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (B, Cin) and weight (Cout, Cin)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    _add_macs(x.shape[0] * weight.shape[0] * weight.shape[1])
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


# --------------------------------------------------------------------------
# convolution


def equivalent_kernel(k: int, dilation: int) -> int:
    """Span of a dilated kernel: k + (k - 1)(dilation - 1)."""
    return k + (k - 1) * (dilation - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError("channel counts must be divisible by groups")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int, dilation: int = 1, **kw) -> "ConvSpec":
        """Stride-1 spec padded so the spatial extent is preserved (odd kernels)."""
        return cls(in_channels, out_channels, kernel, padding=dilation * (kernel - 1) // 2, dilation=dilation, **kw)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_extent(self, size: int) -> int:
        return (size + 2 * self.padding - equivalent_kernel(self.kernel, self.dilation)) // self.stride + 1

    def macs(self, height: int, width: int) -> int:
        ho, wo = self.output_extent(height), self.output_extent(width)
        return self.out_channels * (self.in_channels // self.groups) * self.kernel**2 * ho * wo

    def num_params(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.bias else 0)


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    span = equivalent_kernel(k, dilation)
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]
    b, c = xp.shape[:2]
    # rows ordered (b, i, j), columns (c, ki, kj) to match weight.reshape(Cout, -1)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    cols = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            out[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[
                :, :, i, j
            ]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Dilated 2-D cross-correlation, lowered to a matrix product per group."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (Cout,Cin,k,k), got {weight.shape}")
    if dilation < 1 or stride < 1 or groups < 1 or padding < 0:
        raise ValueError("conv2d: stride, dilation, groups must be >= 1 and padding >= 0")
    B, cin, H, W = x.shape
    cout, cin_g, k, _ = weight.shape
    if cin != cin_g * groups:
        raise ShapeError(
            f"conv2d: input channel dimension is {cin} but weight expects {cin_g * groups} (dim 1 of weight x groups)"
        )
    if cout % groups:
        raise ShapeError(f"conv2d: out channels {cout} not divisible by groups {groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    span = equivalent_kernel(k, dilation)
    ho = (H + 2 * padding - span) // stride + 1
    wo = (W + 2 * padding - span) // stride + 1
    if ho < 1 or wo < 1 or H + 2 * padding < span or W + 2 * padding < span:
        raise ShapeError(
            f"conv2d: kernel exceeds padded input (equivalent kernel {span}, padded extent "
            f"{H + 2 * padding}x{W + 2 * padding})"
        )
    _add_macs(B * cout * cin_g * k * k * ho * wo)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cout_g = cout // groups
    wd = weight.data
    cols_per_group = []
    outs = []
    for gi in range(groups):
        cols = _im2col(xp[:, gi * cin_g : (gi + 1) * cin_g], k, stride, dilation, ho, wo)
        wmat = wd[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
        outs.append(cols @ wmat.T)
        cols_per_group.append(cols)
    out2d = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    out = out2d.reshape(B, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, cout)
        gw = np.empty_like(wd, dtype=np.result_type(g.dtype, wd.dtype))
        gxp = np.zeros(xp_shape, dtype=np.result_type(g.dtype, wd.dtype))
        for gi in range(groups):
            gg = g2d[:, gi * cout_g : (gi + 1) * cout_g]
            wmat = wd[gi * cout_g : (gi + 1) * cout_g].reshape(cout_g, -1)
            gw[gi * cout_g : (gi + 1) * cout_g] = (gg.T @ cols_per_group[gi]).reshape(cout_g, cin_g, k, k)
            if x.requires_grad:
                gcols = gg @ wmat
                gxp[:, gi * cin_g : (gi + 1) * cin_g] = _col2im(
                    gcols, (B, cin_g) + xp_shape[2:], k, stride, dilation, ho, wo
                )
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [np.ascontiguousarray(gx).astype(x.dtype, copy=False), gw.astype(wd.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# --------------------------------------------------------------------------
# resampling and pooling


def bilinear_matrix(size: int, scale: int, dtype=np.float64) -> np.ndarray:
    """(scale*size, size) interpolation matrix, half-pixel (align-corners-false) convention."""
    out = np.zeros((size * scale, size), dtype=dtype)
    for o in range(size * scale):
        src = max((o + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        out[o, i0] += 1.0 - frac
        out[o, i1] += frac
    return out


def bilinear_upsample(x: Tensor, scale: int = 2) -> Tensor:
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise ValueError(f"bilinear_upsample: scale must be a positive integer, got {scale!r}")
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"bilinear_upsample: expected (B,C,H,W) with H,W >= 1, got {x.shape}")
    uh = bilinear_matrix(x.shape[2], scale, x.dtype)
    uw = bilinear_matrix(x.shape[3], scale, x.dtype)
    out = uh @ x.data @ uw.T
    return make_result(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool: expected nonempty (B,C,H,W), got {x.shape}")
    shape = x.shape
    n = shape[2] * shape[3]
    return make_result(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "avgpool",
    )


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2. Ties send the gradient to the first row-major element."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: extent {H}x{W} is odd; pad the input to an even extent")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool")


# --------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization; training mode updates the running stats in place."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: expected (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but parameters have shape {gamma.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    n = B * H * W
    if training:
        if n < 2:
            raise ShapeError(
                "batch_norm: training mode needs at least 2 values per channel "
                "(use batch size >= 2 or eval mode)"
            )
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, C, 1, 1)
    xhat = (xd - mu.astype(xd.dtype).reshape(1, C, 1, 1)) * inv_std
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            dx = inv_std / n * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma.astype(gamma.dtype, copy=False), dbeta.astype(beta.dtype, copy=False)

    return make_result(out, (x, gamma, beta), backward, "batchnorm")
