"""Tensor values and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class UsageError(RuntimeError):
    """An autodiff API was called in an invalid state."""


DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array. Only leaf tensors (those not
    produced by a recorded operation) receive ``grad`` after a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Small arithmetic surface; the ops module holds the real primitives.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _raise_not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Node:
    """One recorded primitive: inputs, output and the vector-Jacobian rule.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations executed while the tape is active.

    Recording happens only for operations with at least one input that
    requires a gradient, so inference under an active tape stays cheap.
    """

    records: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        if self.consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        self.records.append(node)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def make_result(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs grad."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(Node(name, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every leaf tensor that contributed to ``loss``.

    Gradients accumulate into existing ``grad`` buffers. The tape is marked
    consumed; a second call without ``tape.reset()`` raises.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise UsageError("backward() already ran on this tape; call reset() first")
    if loss.is_leaf:
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        _accumulate(loss, np.ones_like(loss.data))
        tape.consumed = True
        return
    if not tape.records or tape.records[-1].output is not loss:
        if not any(node.output is loss for node in tape.records):
            raise UsageError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate(inp, g)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
    tape.consumed = True


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
