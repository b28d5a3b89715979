"""Adam with coupled L2 weight decay, and reduce-on-plateau learning-rate control."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class NumericError(FloatingPointError):
    pass


class Adam:
    """Classic bias-corrected Adam; weight decay is added to the gradient."""

    def __init__(self, named_params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0 or eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                bad = int(np.count_nonzero(~np.isfinite(p.grad)))
                raise NumericError(f"non-finite gradient in parameter '{name}' ({bad} of {p.grad.size} entries)")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1**t
        corr2 = 1 - b2**t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.int64), "lr": np.array([self.lr], dtype=np.float64)}
        for name, _ in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        self.lr = float(state["lr"][0])
        for name, _ in self.params:
            self.m[name][...] = state[f"m.{name}"]
            self.v[name][...] = state[f"v.{name}"]


class ReduceOnPlateau:
    """Multiply lr by ``factor`` once ``patience + 1`` consecutive epochs fail to improve.

    Improvement means a strict decrease of more than ``threshold`` below the
    best value seen. The bad-epoch counter resets on improvement and after
    every reduction.
    """

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 10, threshold: float = 1e-8):
        if patience < 0:
            raise ValueError("patience must be >= 0")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.num_bad = 0

    def step(self, value: float) -> float:
        if value < self.best - self.threshold:
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad > self.patience:
                self.lr *= self.factor
                self.num_bad = 0
        return self.lr

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"state": np.array([self.lr, self.best, self.num_bad], dtype=np.float64)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        lr, best, bad = state["state"]
        self.lr, self.best, self.num_bad = float(lr), float(best), int(bad)
