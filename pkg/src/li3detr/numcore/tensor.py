"""Dense float64 tensors and the append-only tape used for reverse-mode AD."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated."""


_state = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    Leaves are tensors created directly with ``requires_grad=True``; results
    of recorded ops carry the tape that produced them and their slot on it.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; implementations live in ops.py
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


class Node(NamedTuple):
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable ops.

    Node order is insertion order, which is also a valid topological order
    because an op can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._slots = 0
        self._leaves: dict[int, tuple[int, Tensor]] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _slot_of(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t._tape is self:
            return t.node_id
        entry = self._leaves.get(id(t))
        if entry is None:
            # tensors recorded on another tape are treated as constants here
            if t._tape is not None:
                return None
            entry = (self._slots, t)
            self._leaves[id(t)] = entry
            self._slots += 1
        return entry[0]

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        if self.consumed:
            raise ContractError("tape was already consumed by backward(); start a new tape")
        in_ids = tuple(self._slot_of(t) for t in inputs)
        out.node_id = self._slots
        out._tape = self
        self._slots += 1
        self.nodes.append(Node(kind, in_ids, out.node_id, backward))

    def leaves(self) -> list[Tensor]:
        return [t for _, t in sorted(self._leaves.values(), key=lambda e: e[0])]


@contextlib.contextmanager
def tape():
    """Activate a fresh tape for the current thread."""
    prev = active_tape()
    t = Tape()
    _state.tape = t
    try:
        yield t
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def backward(tp: Tape, root: Tensor, set_leaf_grads: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) through ``tp`` and return leaf gradients.

    A tape can be traversed once; a second call raises ContractError so that
    stale saved values are never reused silently.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if tp.consumed:
        raise ContractError("backward called twice on the same tape")
    if root._tape is not tp:
        raise ContractError("root was not produced on this tape")
    tp.consumed = True

    grads: list[np.ndarray | None] = [None] * tp._slots
    grads[root.node_id] = np.ones_like(root.data)
    # nodes are dropped as they are visited: their closures hold the saved
    # activations and form reference cycles through Tensor._tape, which the
    # cyclic collector would otherwise reclaim only lazily
    nodes, tp.nodes = tp.nodes, []
    while nodes:
        node = nodes.pop()
        g = grads[node.output]
        if g is None:
            continue
        grads[node.output] = None
        in_grads = node.backward(g)
        for slot, ig in zip(node.inputs, in_grads):
            if slot is None or ig is None:
                continue
            prev = grads[slot]
            grads[slot] = ig if prev is None else prev + ig

    out: dict[Tensor, np.ndarray] = {}
    for slot, leaf in sorted(tp._leaves.values(), key=lambda e: e[0]):
        g = grads[slot]
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        out[leaf] = g
        if set_leaf_grads:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return out
