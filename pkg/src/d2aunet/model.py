"""D2A U-Net assembly: encoder, RAB decoder with hybrid dilation, gated skips."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import DecoderAttention, GateAttention, hidden_width, SPATIAL_KERNELS
from .nn import Conv2d, ConvBNReLU, Module
from .ops import ConvSpec, ShapeError
from .tensor import Tensor

VGG_CHANNELS = (64, 128, 256, 512, 1024)
RESNEXT_CHANNELS = (64, 256, 512, 1024, 2048)
TOY_CHANNELS = (8, 16, 32, 64, 128)


def equivalent_kernel_size(k: int, n: int) -> int:
    if k < 1 or n < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got k={k}, n={n}")
    return ops.equivalent_kernel(k, n)


def theoretical_receptive_field(kernels: list[tuple[int, int]]) -> int:
    """Receptive field of a stride-1 stack of (kernel, dilation) convolutions."""
    if not kernels:
        raise ValueError("receptive field of an empty stack is undefined")
    return 1 + sum(equivalent_kernel_size(k, n) - 1 for k, n in kernels)


@dataclass
class EncoderSpec:
    style: str = "vgg"
    channels: tuple[int, ...] = TOY_CHANNELS
    resnext_blocks: tuple[int, ...] = (3, 4, 6, 3)
    cardinality: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.resnext_blocks = tuple(int(b) for b in self.resnext_blocks)
        if self.style not in ("vgg", "resnext"):
            raise ValueError(f"encoder style must be 'vgg' or 'resnext', got {self.style!r}")
        # 5 stages is the real architecture; shallower VGG stacks exist for cheap gradient checks
        if self.style == "vgg" and len(self.channels) < 2:
            raise ValueError(f"vgg encoder needs at least 2 stages, got {len(self.channels)}")
        if self.style == "resnext" and len(self.channels) != 5:
            raise ValueError(f"resnext encoder needs exactly 5 stages, got {len(self.channels)}")
        if self.style == "resnext" and len(self.resnext_blocks) != 4:
            raise ValueError("resnext_blocks needs one entry per residual stage (4)")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.channels) - 1) if self.style == "vgg" else 32


@dataclass
class RABSpec:
    channels: int
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 5)
    norm: bool = True
    activation: bool = True
    reduce_ratio: int = 16


@dataclass
class ModelConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    # one width per decoder stage, deepest first; empty mirrors the skip widths
    decoder_channels: tuple[int, ...] = ()
    reduce_ratio: int = 16
    dilations: tuple[int, ...] = (1, 2, 5)
    hdc_norm: bool = True
    up_kernel: int = 3
    fuse_kernel: int = 1
    input_size: int = 64
    out_classes: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        if not self.decoder_channels:
            self.decoder_channels = tuple(reversed(self.encoder.channels[:-1]))
        if len(self.decoder_channels) != len(self.encoder.channels) - 1:
            raise ValueError("decoder stage count must equal encoder stage count - 1")
        if self.out_classes != 1:
            raise ValueError("only the binary head (out_classes = 1) is supported")
        if self.input_size % self.encoder.total_stride:
            raise ValueError(f"input_size {self.input_size} must be divisible by {self.encoder.total_stride}")

    @property
    def skip_channels(self) -> tuple[int, ...]:
        """Skip widths consumed by the decoder stages, deepest first."""
        return tuple(reversed(self.encoder.channels[:-1]))


def full_vgg_config() -> ModelConfig:
    """VGG-style encoder at the width that matches the reference cost figures."""
    return ModelConfig(encoder=EncoderSpec("vgg", (32, 64, 128, 256, 512)), input_size=448)


def full_resnext_config() -> ModelConfig:
    return ModelConfig(encoder=EncoderSpec("resnext", RESNEXT_CHANNELS), input_size=448)


# --------------------------------------------------------------------------
# decoder blocks


class HDC(Module):
    """Stack of padded dilated 3x3 convolutions; channels and extent preserved."""

    def __init__(self, spec: RABSpec, rng=None, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.spec = spec
        self.convs = [
            ConvBNReLU(spec.channels, spec.channels, spec.kernel, rng, dilation=d, norm=spec.norm,
                       act=spec.activation, bn_momentum=bn_momentum, bn_eps=bn_eps)
            for d in spec.dilations
        ]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(f"HDC: input has shape {x.shape}, expected {self.spec.channels} channels")
        for block in self.convs:
            x = block(x)
        return x


class RAB(Module):
    """Residual attention block: ``X + DAM(HDC(X))``."""

    def __init__(self, spec: RABSpec, rng=None, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        self.hdc = HDC(spec, rng, bn_momentum, bn_eps)
        self.dam = DecoderAttention(spec.channels, spec.reduce_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.dam(self.hdc(x)))


class DecoderStage(Module):
    """One decoder level.

    deep path: upsample x2 -> conv -> DAM; skip path: GAM(skip, guide=deep);
    the two are concatenated [deep, skip], fused by a conv and refined by a RAB.
    """

    def __init__(self, deep_ch: int, skip_ch: int, out_ch: int, cfg: ModelConfig, rng=None):
        super().__init__()
        bn = dict(bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
        self.deep_ch, self.skip_ch, self.out_ch = deep_ch, skip_ch, out_ch
        self.up_conv = ConvBNReLU(deep_ch, out_ch, cfg.up_kernel, rng, **bn)
        self.up_dam = DecoderAttention(out_ch, cfg.reduce_ratio, rng)
        self.gam = GateAttention(skip_ch, deep_ch, cfg.reduce_ratio, rng)
        self.fuse = ConvBNReLU(out_ch + skip_ch, out_ch, cfg.fuse_kernel, rng, **bn)
        self.rab = RAB(RABSpec(out_ch, dilations=cfg.dilations, norm=cfg.hdc_norm, reduce_ratio=cfg.reduce_ratio),
                       rng, **bn)

    def forward(self, deep: Tensor, skip: Tensor) -> Tensor:
        if skip.shape[2] != 2 * deep.shape[2] or skip.shape[3] != 2 * deep.shape[3]:
            raise ShapeError(f"decoder stage: skip extent {skip.shape[2:]} must be twice deep extent {deep.shape[2:]}")
        up = self.up_dam(self.up_conv(ops.bilinear_upsample(deep, 2)))
        gated = self.gam(skip, deep)
        return self.rab(self.fuse(ops.concat([up, gated], axis=1)))


# --------------------------------------------------------------------------
# encoders


class DoubleConv(Module):
    def __init__(self, in_ch: int, out_ch: int, rng=None, **bn):
        super().__init__()
        self.c1 = ConvBNReLU(in_ch, out_ch, 3, rng, **bn)
        self.c2 = ConvBNReLU(out_ch, out_ch, 3, rng, **bn)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x))


class VGGEncoder(Module):
    def __init__(self, channels: tuple[int, ...], rng=None, **bn):
        super().__init__()
        ins = (1,) + tuple(channels[:-1])
        self.stages = [DoubleConv(i, o, rng, **bn) for i, o in zip(ins, channels)]

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = ops.max_pool2d(x)
            x = stage(x)
            feats.append(x)
        return feats


class Bottleneck(Module):
    """ResNeXt bottleneck: 1x1 -> grouped 3x3 -> 1x1, projection shortcut when needed."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, cardinality: int, rng=None, **bn):
        super().__init__()
        width = out_ch // 2
        self.reduce = ConvBNReLU(in_ch, width, 1, rng, **bn)
        self.grouped = ConvBNReLU(width, width, 3, rng, stride=stride, groups=cardinality, **bn)
        self.expand = ConvBNReLU(width, out_ch, 1, rng, act=False, **bn)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = ConvBNReLU(in_ch, out_ch, 1, rng, stride=stride, act=False, **bn)

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(self.grouped(self.reduce(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(y, skip))


class ResNeXtEncoder(Module):
    """Untrained ResNeXt-style encoder, present for shape and cost parity only."""

    def __init__(self, spec: EncoderSpec, rng=None, **bn):
        super().__init__()
        ch = spec.channels
        self.stem = ConvBNReLU(1, ch[0], 7, rng, stride=2, **bn)
        layers = []
        in_ch = ch[0]
        for i, (out_ch, n_blocks) in enumerate(zip(ch[1:], spec.resnext_blocks)):
            stride = 1 if i == 0 else 2
            blocks = []
            for b in range(n_blocks):
                blocks.append(Bottleneck(in_ch, out_ch, stride if b == 0 else 1, spec.cardinality, rng, **bn))
                in_ch = out_ch
            layers.append(blocks)
        self.layers = [_Sequential(blocks) for blocks in layers]

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        feats = [x]
        x = ops.max_pool2d(x)
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class _Sequential(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


# --------------------------------------------------------------------------
# full model


class D2AUNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bn = dict(bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
        if cfg.encoder.style == "vgg":
            self.encoder = VGGEncoder(cfg.encoder.channels, rng, **bn)
        else:
            self.encoder = ResNeXtEncoder(cfg.encoder, rng, **bn)
        stages = []
        deep = cfg.encoder.channels[-1]
        for skip, out in zip(cfg.skip_channels, cfg.decoder_channels):
            stages.append(DecoderStage(deep, skip, out, cfg, rng))
            deep = out
        self.decoder = stages
        self.head = Conv2d(ConvSpec(deep, cfg.out_classes, 1), rng)
        self.head.bias.data[...] = 0.0

    def forward(self, image: Tensor) -> Tensor:
        """Raw logits at input resolution, shape (B, 1, H, W)."""
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"model expects (B,1,H,W) grayscale input, got {image.shape}")
        stride = self.cfg.encoder.total_stride
        if image.shape[2] % stride or image.shape[3] % stride:
            raise ShapeError(f"input extent {image.shape[2]}x{image.shape[3]} must be divisible by {stride}")
        feats = self.encoder(image)
        x = feats[-1]
        for stage, skip in zip(self.decoder, reversed(feats[:-1])):
            x = stage(x, skip)
        if self.cfg.encoder.style == "resnext":
            x = ops.bilinear_upsample(x, 2)
        return self.head(x)


# --------------------------------------------------------------------------
# analytic cost


def _conv_cost(cin: int, cout: int, k: int, extent: int, bias: bool, groups: int = 1, norm: bool = False):
    params = cout * (cin // groups) * k * k + (cout if bias else 0) + (2 * cout if norm else 0)
    return params, cout * (cin // groups) * k * k * extent * extent


def _attention_cost(f_ch: int, g_ch: int, r: int, extent: int, gate: bool):
    hid = hidden_width(g_ch, r)
    params = hid * g_ch + hid + f_ch * hid + f_ch
    macs = hid * g_ch + f_ch * hid
    sq_in = 2 if gate else 1
    p, m = _conv_cost(f_ch, 1, 1, extent, True)
    params, macs = params + p, macs + m
    if gate:
        p, m = _conv_cost(g_ch, 1, 1, extent // 2, True)
        params, macs = params + p, macs + m
    for k in SPATIAL_KERNELS:
        p, m = _conv_cost(sq_in, 1, k, extent, True)
        params, macs = params + p, macs + m
    return params, macs


def count_params_flops(cfg: ModelConfig, input_size: int | None = None) -> tuple[int, int]:
    """Closed-form parameter count and multiply-accumulates for one forward of one image.

    Only convolutions and linear layers contribute to the operation count.
    """
    size = input_size or cfg.input_size
    if size % cfg.encoder.total_stride:
        raise ValueError(f"input size {size} must be divisible by {cfg.encoder.total_stride}")
    params = macs = 0

    def acc(pm):
        nonlocal params, macs
        params += pm[0]
        macs += pm[1]

    ch = cfg.encoder.channels
    if cfg.encoder.style == "vgg":
        extents = [size >> i for i in range(len(ch))]
        prev = 1
        for c, e in zip(ch, extents):
            acc(_conv_cost(prev, c, 3, e, False, norm=True))
            acc(_conv_cost(c, c, 3, e, False, norm=True))
            prev = c
    else:
        extents = [size >> (i + 1) for i in range(5)]
        acc(_conv_cost(1, ch[0], 7, extents[0], False, norm=True))
        in_ch = ch[0]
        for i, (out, n) in enumerate(zip(ch[1:], cfg.encoder.resnext_blocks)):
            e_out = extents[i + 1]
            for b in range(n):
                stride = 2 if (b == 0 and i > 0) else 1
                width = out // 2
                e_in = e_out * stride
                acc(_conv_cost(in_ch, width, 1, e_in, False, norm=True))
                acc(_conv_cost(width, width, 3, e_out, False, groups=cfg.encoder.cardinality, norm=True))
                acc(_conv_cost(width, out, 1, e_out, False, norm=True))
                if stride != 1 or in_ch != out:
                    acc(_conv_cost(in_ch, out, 1, e_out, False, norm=True))
                in_ch = out

    deep = ch[-1]
    for skip, out, e in zip(cfg.skip_channels, cfg.decoder_channels, reversed(extents[:-1])):
        acc(_conv_cost(deep, out, cfg.up_kernel, e, False, norm=True))
        acc(_attention_cost(out, out, cfg.reduce_ratio, e, gate=False))
        acc(_attention_cost(skip, deep, cfg.reduce_ratio, e, gate=True))
        acc(_conv_cost(out + skip, out, cfg.fuse_kernel, e, False, norm=True))
        for _ in cfg.dilations:
            acc(_conv_cost(out, out, 3, e, not cfg.hdc_norm, norm=cfg.hdc_norm))
        acc(_attention_cost(out, out, cfg.reduce_ratio, e, gate=False))
        deep = out
    acc(_conv_cost(deep, cfg.out_classes, 1, size, True))
    return params, macs


def format_cost_report(cfg: ModelConfig, input_size: int | None = None) -> str:
    size = input_size or cfg.input_size
    params, macs = count_params_flops(cfg, size)
    return (
        f"encoder: {cfg.encoder.style} {list(cfg.encoder.channels)}\n"
        f"decoder: {list(cfg.decoder_channels)}\n"
        f"params: {params} ({params / 1e6:.2f} M)\n"
        f"flops (multiply-accumulates) at {size}x{size}: {macs} ({macs / 1e9:.2f} G)\n"
    )
