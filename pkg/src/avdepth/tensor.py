"""Dense float64 tensors with a dynamic reverse-mode tape.

Each op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order
and releases the closures afterwards unless ``retain_graph`` is set.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when backward is called on something that cannot be differentiated."""


class DimensionError(ValueError):
    """Raised when operand shapes disagree."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"empty tensor shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; elementwise ops require equal shapes (or a python scalar)
    def __add__(self, other):
        from . import ops
        return ops.add_scalar(self, other) if _is_scalar(other) else ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add_scalar(self, -other) if _is_scalar(other) else ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul_scalar(self, other) if _is_scalar(other) else ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _raise_scalar(shape):
    raise GraphError(f"item() needs a single-element tensor, got shape {shape}")


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap an op output, attaching it to the graph when any parent tracks grads."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    if any(n._parents and n._backward is None for n in order):
        raise GraphError("graph was already freed; pass retain_graph=True to backward twice")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._parents:
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g
    if not retain_graph:
        for node in order:
            if node._parents:
                node._backward = None
