"""Dense N-d tensor with reverse-mode automatic differentiation.

Storage and compute are float32 (row-major, NCHW convention for feature
maps). float64 tensors are permitted for the finite-difference shadow
evaluation used by the gradient checker, and for nothing else.

Differentiation uses a dynamic tape: while a ``Tape`` is active (as a
context manager), every primitive whose inputs require grad appends a
node holding the output, the input references and a backward rule. The
tape is recorded in execution order, which is a topological order of the
dynamically executed graph, so replaying the rules in reverse implements
the chain rule. Without an active tape, ops run plain (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float32

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tensor:
    """A numpy-backed value that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=DTYPE if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        # Unreachable requires-grad leaves read as zero after a backward pass.
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self._grad is None:
            self._grad = g.astype(self.data.dtype, copy=True)
        else:
            self._grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self._tape is None:
            raise ContractError("tensor is not connected to a tape; run the forward pass inside `with Tape():`")
        self._tape.backward(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the full op set lives in canet.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.rule = rule


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = _tape_stack()
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires-grad tensor reachable from `loss`."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss._grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out._grad
            if g is None:
                continue
            grads = node.rule(g)
            for t, gin in zip(node.inputs, grads):
                if gin is not None:
                    t.accumulate_grad(gin)


def record(out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Attach `out` to the active tape if any input participates in grad.

    `rule(grad_out) -> [grad_in or None, ...]` must align with `inputs`.
    Rules may return None for inputs whose `requires_grad` is False.
    """
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append(_Node(out, inputs, rule))
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed tensor dtypes in one op: {sorted(map(str, dtypes))}")
