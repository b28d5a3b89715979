"""Minimal module system: parameter discovery, train/eval mode, buffers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import DEFAULT_DTYPE, Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for k, buf in m._buffers.items():
                m._buffers[k] = buf.astype(dtype)
        return self


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel**2
        if rng is None:
            w = np.zeros(spec.weight_shape, dtype=DEFAULT_DTYPE)
        else:
            w = he_normal(rng, spec.weight_shape, fan_in)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(spec.out_channels, dtype=DEFAULT_DTYPE)) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return ops.conv2d(x, self.weight, self.bias, s.stride, s.padding, s.dilation, s.groups)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        shape = (out_features, in_features)
        w = np.zeros(shape, dtype=DEFAULT_DTYPE) if rng is None else he_normal(rng, shape, in_features)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.beta = parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self._buffers["running_mean"] = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self._buffers["running_var"] = np.ones(channels, dtype=DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


class ConvBNReLU(Module):
    """conv -> batch norm -> ReLU; the conv drops its bias when a norm follows."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None, dilation: int = 1,
                 stride: int = 1, groups: int = 1, norm: bool = True, act: bool = True,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = Conv2d(ConvSpec(in_ch, out_ch, kernel, stride, pad, dilation, bias=not norm, groups=groups), rng)
        self.norm = BatchNorm2d(out_ch, bn_momentum, bn_eps) if norm else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return ops.relu(x) if self.act else x
