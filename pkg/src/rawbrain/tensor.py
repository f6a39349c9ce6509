"""Tensor storage and the reverse-mode tape.

Operations in :mod:`rawbrain.ops` record a :class:`Node` on the innermost
active :class:`Tape` whenever one of their inputs requires a gradient.
Calling :meth:`Tape.backward` walks those nodes in reverse recording order,
which is a valid reverse topological order because a node is always recorded
after the nodes producing its inputs.

Example
-------
>>> import numpy as np
>>> from rawbrain import ops
>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = ops.mse_loss(x, np.zeros(2))
>>> tape.backward(loss)
>>> x.grad
array([1., 2.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GradientError, ShapeError

MAX_RANK = 5

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense array of rank <= 5 with an optional gradient buffer.

    Integer input is stored as float32; float32 and float64 arrays keep their
    precision so the same ops serve training (32-bit) and gradient checks
    (64-bit).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_from_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._from_op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation.

    ``backward`` maps the gradient of ``output`` to a tuple with one entry per
    input (``None`` where the input needs no gradient).
    """

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)
        # a flag, not a back-reference: Node -> output -> Node would be a cycle
        node.output._from_op = True

    def backward(self, loss: Tensor):
        backward(self, loss)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording a node if gradients are needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Only leaves (tensors not produced by a recorded node) receive ``.grad``;
    a leaf used several times gets the sum of its contributions.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves (or to tensors recorded on another tape)
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if key in grads and key not in seen and t.is_leaf:
                seen.add(key)
                g = grads[key].astype(t.data.dtype, copy=False)
                t.grad = g.copy() if t.grad is None else t.grad + g
    if loss.is_leaf and loss.requires_grad and id(loss) in grads:
        g = grads[id(loss)]
        loss.grad = g.copy() if loss.grad is None else loss.grad + g
