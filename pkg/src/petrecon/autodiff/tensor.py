"""Tensors, the recorded graph and reverse-mode accumulation.

Every tensor produced by a differentiable op gets a monotonically increasing
``node_id``.  Creation order is a valid topological order of the graph, so the
tape for a loss is simply the set of reachable nodes sorted by id, and the
backward sweep visits them in exactly the reverse order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from petrecon.errors import InputError, NumericalError

_ids = itertools.count(1)
_debug = False

PARAM_ROLES = ("weight", "bias", "bn_gamma", "bn_beta")


def set_debug(enabled: bool) -> None:
    """When on, every op output is checked for NaN/inf as it is produced."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "op", "parents", "backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops
    def __add__(self, other):
        from petrecon.autodiff import ops
        return ops.add(self, ops.as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from petrecon.autodiff import ops
        return ops.sub(self, ops.as_tensor(other, like=self))

    def __rsub__(self, other):
        from petrecon.autodiff import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from petrecon.autodiff import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from petrecon.autodiff import ops
        return ops.scalar_mul(self, -1.0)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name", "role")

    def __init__(self, data, name: str, role: str = "weight"):
        if role not in PARAM_ROLES:
            raise InputError(f"unknown parameter role {role!r}")
        super().__init__(data, requires_grad=True)
        self.name = name
        self.role = role

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role})"


def record(op: str, data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one gradient per parent."""
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    out.op = op
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


@dataclass
class TapeEntry:
    node_id: int
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]


class Tape:
    """The recorded operations a loss depends on, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if not t.requires_grad or t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        return cls([seen[k] for k in sorted(seen)])

    @property
    def entries(self) -> list[TapeEntry]:
        return [TapeEntry(t.node_id, t.op, tuple(p.node_id for p in t.parents), t.shape)
                for t in self.nodes]

    def dump(self) -> str:
        """One JSON object per recorded node, oldest first."""
        lines = []
        for t in self.nodes:
            row = {"id": t.node_id, "op": t.op,
                   "inputs": [p.node_id for p in t.parents], "shape": list(t.shape)}
            if isinstance(t, Parameter):
                row["name"] = t.name
            lines.append(json.dumps(row))
        return "\n".join(lines)

    def __len__(self):
        return len(self.nodes)


class Gradients(dict):
    """``name -> gradient`` for every Parameter on the tape, plus lookup by tensor."""

    def __init__(self, by_id: dict[int, np.ndarray], params: dict[str, Parameter]):
        super().__init__()
        self._by_id = by_id
        for name, p in params.items():
            g = by_id.get(p.node_id)
            self[name] = g if g is not None else np.zeros_like(p.data)

    def of(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(t.node_id)
        return g if g is not None else np.zeros_like(t.data)


def backward(loss: Tensor, params: Sequence[Parameter] | None = None,
             upstream: float = 1.0) -> Gradients:
    """Reverse-mode sweep from a scalar loss.

    ``params`` lists parameters that must appear in the result even when the
    loss does not depend on them (they get zero gradients).
    """
    if loss.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.full(loss.shape, float(upstream))
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    named = {t.name: t for t in tape.nodes if isinstance(t, Parameter)}
    for p in params or ():
        named.setdefault(p.name, p)
    return Gradients(grads, named)
