"""Dense float64 tensors with a define-by-run gradient tape.

Every differentiable op appends one node to the active :class:`GradTape`.
``backward`` replays the tape in reverse append order, which is a valid
topological order because an op can only consume tensors that already exist.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape or usage error raised by tensor ops."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """Append-only record of differentiable ops for one training step.

    Use as a context manager; ops executed inside the block on tensors that
    require grad are recorded.  Tapes are thread-local.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, kind: str, inputs: Sequence["Tensor"], output: "Tensor",
               backward_fn: Callable) -> None:
        if self.consumed:
            raise TensorError("gradient tape already consumed by backward()")
        output._node = (self, len(self.nodes))
        self.nodes.append(Node(kind, tuple(inputs), output, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        if loss._node is None or loss._node[0] is not self:
            raise TensorError("backward() called on a tensor that is not on this tape")
        if loss.data.size != 1:
            raise TensorError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TensorError("gradient tape already consumed by backward()")
        end = loss._node[1]
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: end + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._node is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.pop(key)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()
        self.consumed = True


class Tensor:
    """Row-major float64 array plus optional gradient.

    ``requires_grad`` marks a leaf parameter; results of ops on such tensors
    are recorded on the active tape (if any).
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        return None if self._node is None else self._node[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else \
            _raise(TensorError(f"item() on tensor of shape {self.shape}"))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator overloads are attached in ops.py


def _raise(exc):
    raise exc


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(kind: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable) -> Tensor:
    """Wrap an op result, check finiteness and record it on the active tape."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {kind}")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out._node = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = active_tape()
        if tape is None:
            out.requires_grad = False
        else:
            tape.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that contributed to ``loss``."""
    if loss._node is None:
        raise TensorError("backward() called on a detached tensor (no tape node)")
    loss._node[0].backward(loss)
