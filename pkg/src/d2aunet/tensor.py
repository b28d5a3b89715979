"""Dense tensors with a reverse-mode tape.

Every differentiable primitive in :mod:`d2aunet.ops` builds a :class:`Tensor`
whose ``_backward`` closure maps the output gradient to one gradient per
parent. :func:`backward` walks the recorded graph in reverse topological
order exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    # operator sugar; the heavy lifting lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op output and record it on the tape if any parent needs gradients."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf with d(loss)/d(leaf).

    The graph is released afterwards, so a second call on the same root
    raises. Leaves that still hold a gradient from an earlier pass also
    raise; clear them with ``zero_grad`` first.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward() already ran on this graph; recompute the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss is not on the tape (no input requires grad)")

    order = topological_order(loss)
    leaves = [n for n in order if n.is_leaf]
    for leaf in leaves:
        if leaf.grad is not None:
            raise RuntimeError(
                "leaf already holds a gradient from a previous backward(); "
                "call zero_grad() before the next step"
            )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g
            continue
        if g is not None and node._backward is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(f"{node._op}: gradient shape {pg.shape} != {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._consumed = True
        node._backward = None
        node._parents = ()
    for leaf in leaves:
        if leaf.grad is None and leaf.requires_grad:
            leaf.grad = np.zeros_like(leaf.data)
