"""Dense tensors, a define-by-run gradient tape and a named parameter store.

Every differentiable operation in :mod:`sdnet.ops` goes through
:func:`record`, which appends a node to the innermost active
:class:`GradTape`.  Nothing is recorded when no tape is active, so inference
runs without bookkeeping.

Example
-------
>>> from sdnet import ops
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with GradTape() as tape:
...     y = ops.sum(ops.mul(x, x))
>>> tape.backward(y)[x.node_id]
array([2., 4., 6.], dtype=float32)
"""
from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """N-dimensional float array plus the id linking it into a tape.

    ``data`` is always a C-contiguous float32 or float64 array.  Float64 is
    kept only when a float64 numpy array is passed (the finite-difference
    oracle does this); everything else becomes float32.
    """

    __slots__ = ("data", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # Only an explicit float64 array opts out of the float32 default.
            is_f64 = isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64
            dtype = np.float64 if is_f64 else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.node_id = next(_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, id={self.node_id})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    node_id: int
    parent_ids: tuple[int, ...]
    rule: str
    backward: BackwardFn
    shape: tuple[int, ...]


class GradTape:
    """Append-only record of the operations executed while it is active.

    Use as a context manager.  Nodes are appended in execution order, which is
    a topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(t.node_id)

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or t.node_id in self._tracked

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Reverse-accumulate gradients of scalar ``root`` into ``self.grads``."""
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.node_id)
            if g is None:
                continue
            needs = [pid in self._tracked for pid in node.parent_ids]
            parent_grads = node.backward(g, needs)
            for pid, need, pg in zip(node.parent_ids, needs, parent_grads):
                if not need or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last root w.r.t. ``t`` (zeros if unreachable)."""
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


def _stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(
    out: np.ndarray,
    parents: Sequence[Tensor],
    rule: str,
    backward: BackwardFn,
) -> Tensor:
    """Wrap ``out`` in a Tensor and register it on the active tape if needed."""
    result = Tensor(out)
    tape = active_tape()
    if tape is None:
        return result
    tracked = False
    for p in parents:
        if tape.is_tracked(p):
            tape._tracked.add(p.node_id)
            tracked = True
    if tracked:
        tape._tracked.add(result.node_id)
        tape.nodes.append(
            Node(result.node_id, tuple(p.node_id for p in parents), rule, backward, out.shape)
        )
    return result


@dataclass
class ParamStore:
    """Ordered ``name -> Tensor`` map of learnable (and frozen) parameters."""

    entries: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        self.entries[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def trainable_items(self):
        return [(k, v) for k, v in self.entries.items() if self.trainable[k]]

    def set(self, name: str, value: np.ndarray) -> None:
        """Replace the value of ``name`` in place, keeping its shape."""
        t = self.entries[name]
        value = np.asarray(value, dtype=t.data.dtype)
        if value.shape != t.shape:
            raise ShapeError(f"{name}: expected shape {t.shape}, got {value.shape}")
        t.data = np.ascontiguousarray(value)

    def num_elements(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.entries.items())

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.entries):
            missing = sorted(set(self.entries) - set(state))
            extra = sorted(set(state) - set(self.entries))
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k in self.entries:
                self.set(k, v)
