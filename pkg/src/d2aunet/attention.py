"""Gate attention (skip connections) and decoder attention (post-upsample) modules.

Both fuse a channel map of shape (B, C, 1, 1) with a spatial map of shape
(B, 1, H, W) by elementwise multiplication with the input feature.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .nn import Conv2d, Linear, Module
from .ops import ConvSpec, ShapeError
from .tensor import Tensor

SPATIAL_KERNELS = (3, 5, 7)

AttentionHook = Callable[[str, np.ndarray], None]


def hidden_width(channels: int, reduce_ratio: int) -> int:
    if reduce_ratio < 1:
        raise ValueError(f"reduce ratio must be >= 1, got {reduce_ratio}")
    return max(1, channels // reduce_ratio)


def _mlp_attention(pooled: Tensor, w0: Linear, w1: Linear) -> Tensor:
    b, c = pooled.shape[:2]
    h = ops.relu(w0(ops.reshape(pooled, (b, c))))
    z = ops.sigmoid(w1(h))
    return ops.reshape(z, (b, z.shape[1], 1, 1))


def _multi_kernel_sum(x: Tensor, convs: list[Conv2d]) -> Tensor:
    out = convs[0](x)
    for conv in convs[1:]:
        out = ops.add(out, conv(x))
    return out


class GateAttention(Module):
    """Refines a skip feature F using a deeper guiding signal G.

    Channel attention comes from G's channels (C_g -> C_g/r -> C_f), spatial
    attention from the concatenation [squeeze(F), upsample(squeeze(G))].
    """

    def __init__(self, f_channels: int, g_channels: int, reduce_ratio: int = 16, rng=None):
        super().__init__()
        self.f_channels = f_channels
        self.g_channels = g_channels
        self.reduce_ratio = reduce_ratio
        hid = hidden_width(g_channels, reduce_ratio)
        self.mlp_w0 = Linear(g_channels, hid, rng)
        self.mlp_w1 = Linear(hid, f_channels, rng)
        self.squeeze_f = Conv2d(ConvSpec(f_channels, 1, 1), rng)
        self.squeeze_g = Conv2d(ConvSpec(g_channels, 1, 1), rng)
        self.spatial_convs = [Conv2d(ConvSpec.same(2, 1, k), rng) for k in SPATIAL_KERNELS]
        self.hook: AttentionHook | None = None

    def _check(self, f: Tensor, g: Tensor) -> None:
        if g.shape[1] != self.g_channels:
            raise ShapeError(f"GAM: guide has {g.shape[1]} channels, expected {self.g_channels}")
        if f.shape[1] != self.f_channels:
            raise ShapeError(f"GAM: feature has {f.shape[1]} channels, expected {self.f_channels}")
        if f.shape[2] != 2 * g.shape[2] or f.shape[3] != 2 * g.shape[3]:
            raise ShapeError(
                f"GAM: feature extent {f.shape[2:]} must be exactly twice the guide extent {g.shape[2:]}"
            )

    def channel_attention(self, g: Tensor) -> Tensor:
        if g.ndim != 4 or g.shape[1] != self.g_channels:
            raise ShapeError(f"GAM: guide has shape {g.shape}, expected {self.g_channels} channels")
        return _mlp_attention(ops.global_avg_pool(g), self.mlp_w0, self.mlp_w1)

    def spatial_attention(self, f: Tensor, g: Tensor) -> Tensor:
        self._check(f, g)
        fr = self.squeeze_f(f)
        gr = ops.bilinear_upsample(self.squeeze_g(g), 2)
        both = ops.concat([fr, gr], axis=1)
        return ops.sigmoid(_multi_kernel_sum(both, self.spatial_convs))

    def forward(self, f: Tensor, g: Tensor) -> Tensor:
        self._check(f, g)
        zs = self.spatial_attention(f, g)
        zc = self.channel_attention(g)
        if self.hook is not None:
            self.hook("spatial", zs.data)
            self.hook("channel", zc.data)
        return ops.mul(ops.mul(f, zs), zc)


class DecoderAttention(Module):
    """Single-input variant: both attention maps are computed from F itself."""

    def __init__(self, channels: int, reduce_ratio: int = 16, rng=None):
        super().__init__()
        self.channels = channels
        self.reduce_ratio = reduce_ratio
        hid = hidden_width(channels, reduce_ratio)
        self.mlp_w0 = Linear(channels, hid, rng)
        self.mlp_w1 = Linear(hid, channels, rng)
        self.squeeze = Conv2d(ConvSpec(channels, 1, 1), rng)
        self.spatial_convs = [Conv2d(ConvSpec.same(1, 1, k), rng) for k in SPATIAL_KERNELS]
        self.hook: AttentionHook | None = None

    def channel_attention(self, f: Tensor) -> Tensor:
        return _mlp_attention(ops.global_avg_pool(f), self.mlp_w0, self.mlp_w1)

    def spatial_attention(self, f: Tensor) -> Tensor:
        return ops.sigmoid(_multi_kernel_sum(self.squeeze(f), self.spatial_convs))

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"DAM: input has shape {f.shape}, expected {self.channels} channels")
        zs = self.spatial_attention(f)
        zc = self.channel_attention(f)
        if self.hook is not None:
            self.hook("spatial", zs.data)
            self.hook("channel", zc.data)
        return ops.mul(ops.mul(f, zs), zc)


class AttentionRecorder:
    """Hook target that keeps every emitted map, keyed by module name."""

    def __init__(self):
        self.maps: list[tuple[str, str, np.ndarray]] = []

    def attach(self, model: Module) -> "AttentionRecorder":
        for name, mod in _named_modules(model):
            if isinstance(mod, (GateAttention, DecoderAttention)):
                mod.hook = self._make_hook(name or type(mod).__name__)
        return self

    def _make_hook(self, name: str) -> AttentionHook:
        def hook(kind: str, arr: np.ndarray) -> None:
            self.maps.append((name, kind, arr.copy()))

        return hook

    def save(self, out_dir: str | Path) -> list[Path]:
        """Write each spatial map (first batch item) as an 8-bit grayscale PNG."""
        from PIL import Image

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for i, (name, kind, arr) in enumerate(self.maps):
            if kind != "spatial":
                continue
            img = np.clip(np.rint(arr[0, 0] * 255), 0, 255).astype(np.uint8)
            path = out_dir / f"{i:03d}_{name.replace('.', '_')}_{kind}.png"
            Image.fromarray(img).save(path)
            written.append(path)
        return written


def detach_hooks(model: Module) -> None:
    for _, mod in _named_modules(model):
        if isinstance(mod, (GateAttention, DecoderAttention)):
            mod.hook = None


def _named_modules(model: Module, prefix: str = ""):
    yield prefix, model
    for name, value in model._children():
        if isinstance(value, Module):
            yield from _named_modules(value, f"{prefix}.{name}" if prefix else name)
