"""Dense tensors and the tape used for reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array.  Operations in
:mod:`nfuse.ops` record themselves on the active :class:`Tape` whenever one
of their inputs is grad-enabled; :func:`backward` then walks the tape in
reverse append order and accumulates gradients for every leaf.

Usage::

    w = Tensor(np.ones((3, 2)), grad_enabled=True)
    with Tape() as tape:
        loss = ops.sum(ops.matmul(x, w))
    (dw,) = grad(loss, [w], tape)
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype: contextvars.ContextVar = contextvars.ContextVar("nfuse_dtype", default=np.float32)
_active_tape: contextvars.ContextVar = contextvars.ContextVar("nfuse_tape", default=None)


class ShapeError(ValueError):
    """Operand shapes do not conform for an op (also raised for bad axes)."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + ", ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(FloatingPointError):
    """An op produced NaN/Inf from finite inputs."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: result overflowed to non-finite values")


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Set the dtype used for newly constructed tensors ("f32" or "f64")."""
    if name not in DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    token = _default_dtype.set(DTYPES[name])
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on whatever tape is active."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    """Immutable n-dimensional array with optional gradient participation."""

    __slots__ = ("data", "grad_enabled", "node_id", "tape")

    def __init__(self, data, grad_enabled: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError("tensor", arr.shape, detail="extents must be positive")
        arr.flags.writeable = False
        self.data = arr
        self.grad_enabled = grad_enabled
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.grad_enabled = False
        t.node_id = None
        t.tape = None
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", grad_enabled=True" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the functions in nfuse.ops are the primary surface.
    def __add__(self, other):
        from nfuse import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from nfuse import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from nfuse import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from nfuse import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from nfuse import ops
        return ops.matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    saved: tuple
    shape: tuple[int, ...]


class Tape:
    """Append-only record of differentiable operations.

    Leaves (grad-enabled tensors not produced on this tape) are registered
    lazily the first time an op consumes them, keyed by object identity, so
    one parameter tensor can take part in many tapes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> int | None:
        if t.node_id is not None:
            if t.tape is not self:
                raise TapeError("tensor was recorded on a different tape")
            return t.node_id
        if not t.grad_enabled:
            return None
        nid = self._leaves.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), (), t.shape))
            self._leaves[id(t)] = nid
            self._leaf_refs.append(t)
        return nid

    def leaf_id(self, t: Tensor) -> int | None:
        return self._leaves.get(id(t))

    def record(self, op: str, inputs: Sequence[Tensor], saved: tuple, shape) -> int:
        ids = tuple(self.node_of(x) for x in inputs)
        self.nodes.append(Node(op, ids, saved, tuple(shape)))
        return len(self.nodes) - 1


def active_tape() -> Tape | None:
    return _active_tape.get()


# op name -> rule(saved, upstream_grad) -> per-input gradients (None = no grad)
BACKWARD_RULES: dict = {}


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every leaf on ``tape``, keyed by node id."""
    tape = tape if tape is not None else loss.tape
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if tape is None or loss.node_id is None or loss.tape is not tape:
        raise TapeError("loss is not a node on the given tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            continue
        in_grads = BACKWARD_RULES[node.op](node.saved, g)
        for i, gi in zip(node.inputs, in_grads):
            if i is None or gi is None:
                continue
            grads[i] = grads[i] + gi if i in grads else gi

    out = {}
    for nid, node in enumerate(tape.nodes):
        if node.op != "leaf":
            continue
        g = grads.get(nid)
        if g is None:
            g = np.zeros(node.shape, dtype=loss.dtype)
        out[nid] = Tensor._wrap(np.ascontiguousarray(g))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor], tape: Tape | None = None) -> list[Tensor]:
    """Gradients of ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors that never reached the loss get zero gradients.
    """
    tape = tape if tape is not None else loss.tape
    leaf_grads = backward(loss, tape)
    result = []
    for t in wrt:
        nid = tape.leaf_id(t)
        if nid is None:
            result.append(Tensor._wrap(np.zeros(t.shape, dtype=t.dtype)))
        else:
            result.append(leaf_grads[nid])
    return result
