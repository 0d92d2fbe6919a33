"""Reverse-mode differentiation on an explicit tape.

Values are plain ``float64`` numpy arrays. A :class:`Var` is a value that has
been recorded on a :class:`Tape`; every primitive below accepts either a
``Var`` or a bare array and only records when at least one input is a ``Var``.
Calling the same code with bare arrays therefore runs a plain forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "backward",
    "value_of",
    "as_array",
]


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so every node's inputs precede
    it. Leaves are nodes without parents.
    """

    nodes: list[_Node] = field(default_factory=list)
    _watched: dict = field(default_factory=dict)

    def leaf(self, value) -> "Var":
        self.nodes.append(_Node((), None))
        return Var(as_array(value), self, len(self.nodes) - 1)

    def watch(self, key, value) -> "Var":
        """Leaf for ``value`` cached under ``key`` (one leaf per key per tape)."""
        if key not in self._watched:
            self._watched[key] = self.leaf(value)
        return self._watched[key]

    def record(self, value: np.ndarray, parents: Sequence["Var"], vjp) -> "Var":
        self.nodes.append(_Node(tuple(p.index for p in parents), vjp))
        return Var(value, self, len(self.nodes) - 1)

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

    # arithmetic sugar; the primitives live in ops.py
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
        return ops.mul(self, 1.0 / as_array(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else as_array(x)


def backward(tape: Tape, output: Var, wrt: Sequence[Var] | None = None):
    """Gradient of a scalar ``output`` with respect to recorded leaves.

    With ``wrt`` given, returns one array per requested variable (zeros for
    variables the output does not depend on). Otherwise returns a dict
    mapping leaf index to gradient for every leaf that was reached.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output is not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")

    grads: list[np.ndarray | None] = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    nodes = tape.nodes
    for i in range(output.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg

    if wrt is not None:
        out = []
        for v in wrt:
            g = grads[v.index] if v.index < len(grads) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out
    return {
        i: g
        for i, g in enumerate(grads)
        if g is not None and nodes[i].vjp is None
    }
