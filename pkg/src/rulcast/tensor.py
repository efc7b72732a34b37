"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation (see `rulcast.ops`) records its inputs and a gradient
function on the output tensor, so the computation record is the graph
hanging off the loss. ``backward`` on a scalar walks that graph once in
reverse topological order and accumulates gradients on every tensor that
requires them; gradients add across multiple uses of a tensor, so callers
zero them between optimizer steps.

A graph is single-threaded while a backward pass is pending. Tensors with
no pending backward are safe to hand to other threads.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import UsageError

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "op", "tid", "_grad", "_parents", "_grad_fn")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.tid: int = next(Tensor._ids)
        self._grad: Optional[Array] = None
        self._parents: tuple["Tensor", ...] = ()
        self._grad_fn: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> Array:
        """Accumulated gradient; zeros if backward never touched this tensor."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        """A leaf view of the same values, cut off from the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Populate gradients of every reachable tensor that requires them.

        The receiver must be a scalar (the loss). Each graph node is
        visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        order = graph_nodes(self)
        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node._grad is None:
                continue
            grads = node._grad_fn(node._grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                parent._grad = g if parent._grad is None else parent._grad + g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def make_op(name: str, inputs: Sequence[Tensor], data: Array, grad_fn) -> Tensor:
    """Build the output tensor of an operation.

    ``grad_fn`` maps the upstream gradient to one gradient per input
    (``None`` for inputs that need no gradient). When recording is off or
    no input requires grad, the output is a plain leaf.
    """
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = name
        out._parents = tuple(inputs)
        out._grad_fn = grad_fn
    return out


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root``, in forward topological order.

    Iterative DFS so long chains (deep models, long training graphs) never
    hit the recursion limit.
    """
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class RecordEntry(NamedTuple):
    op: str
    input_ids: tuple[int, ...]
    output_id: int


def computation_record(root: Tensor) -> list[RecordEntry]:
    """The recorded forward pass as (op, input ids, output id) entries.

    Entries come out in topological order: every input id is either the
    output of an earlier entry or a leaf. The saved forward context lives
    in the gradient closures and is not exposed here.
    """
    return [
        RecordEntry(n.op, tuple(p.tid for p in n._parents), n.tid)
        for n in graph_nodes(root)
        if n._parents
    ]
