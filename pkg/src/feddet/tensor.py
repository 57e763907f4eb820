"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is stored as contiguous (row-major) 64-bit arrays. Operations in
:mod:`feddet.ops` record their adjoint rules on the active :class:`Tape`;
calling :func:`backward` on a scalar walks the tape once in reverse and
accumulates gradients into ``Tensor.grad``.

Tensors and tapes are single-threaded values. Each tape lives on a
thread-local stack, so concurrent training nodes (one thread each) never see
each other's recordings.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError

__all__ = ["Tensor", "Tape", "backward", "active_tape", "no_grad"]


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 \
                and data.flags["C_CONTIGUOUS"]:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64, order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# A record's backward_fn maps the output gradient to one gradient per input
# (None for inputs that need no gradient).
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, which is automatically a
    topological order (an operation's inputs always exist before its output),
    so one reverse sweep visits every record exactly once.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, BackwardFn]] = []

    def record(self, inputs: tuple, output: Tensor, backward_fn: BackwardFn) -> None:
        self._records.append((inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    """The innermost open tape on this thread, or None when not recording."""
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Context that suspends recording even when a tape is open."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor in ``loss``'s ancestry.

    Gradients accumulate across repeated calls; tensors never recorded on the
    tape (disconnected from the loss) keep ``grad is None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Flow gradients live in a per-call map so that a second backward call
    # re-propagates from scratch and *adds* onto .grad.
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for inputs, output, backward_fn in reversed(tape._records):
        out_g = flow.get(id(output))
        if out_g is None:
            continue
        in_grads = backward_fn(out_g)
        for parent, g in zip(inputs, in_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = g
                tensors[key] = parent
    for key, g in flow.items():
        t = tensors[key]
        if t.requires_grad:
            t.accumulate_grad(g)
