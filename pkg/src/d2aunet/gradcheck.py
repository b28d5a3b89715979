"""Central finite-difference checks for the tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple, eps: float = 1e-6) -> float:
    orig = t.data[index]
    t.data[index] = orig + eps
    up = fn().item()
    t.data[index] = orig - eps
    down = fn().item()
    t.data[index] = orig
    return (up - down) / (2 * eps)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``fn`` recomputes a scalar from ``inputs`` (float64 tensors). Per input
    tensor the error is ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``
    over the checked entries; ``max_entries`` samples a random subset of entries.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    out = fn()
    backward(out)
    analytic = [t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = np.arange(t.data.size)
        if max_entries is not None and flat.size > max_entries:
            flat = np.sort(rng.choice(flat, max_entries, replace=False))
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = np.array([numeric_grad(fn, t, i, eps) for i in idx])
        ana = np.array([a[i] for i in idx])
        scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0))
        if scale == 0:
            continue
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
