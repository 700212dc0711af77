"""Tensors, parameters and the recording tape used for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense array plus a flag saying whether gradients should reach it."""

    __slots__ = ("value", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar; kernels live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor with its own gradient accumulator."""

    __slots__ = ("id", "grad", "trainable")

    def __init__(self, id: str, value, trainable: bool = True):
        super().__init__(np.array(value), requires_grad=trainable)
        self.id = id
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.shape})"


class _Entry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active: list = []


class Tape:
    """Ordered record of kernel applications.

    Kernels executed inside ``with Tape() as tape:`` append an entry holding
    their operands, output and backward rule. Outside any tape nothing is
    recorded, which is the cheap path for evaluation.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def _append(self, entry: _Entry):
        self.entries.append(entry)
        self._outputs.add(id(entry.output))

    def contains(self, t: Tensor) -> bool:
        return id(t) in self._outputs


class paused:
    """Context in which kernels run without recording, even inside a Tape."""

    def __enter__(self):
        _active.append(None)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False


def active_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


def record(op: str, inputs: Sequence[Tensor], value: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a kernel result and, if a tape is active, log how to differentiate it."""
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(value, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape._append(_Entry(op, tuple(inputs), out, backward))
    elif tape is not None:
        # constant w.r.t. every parameter, but still a legal loss for this tape
        tape._outputs.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every Parameter reached from ``loss``.

    Repeated calls add to the existing accumulators.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.contains(loss):
        raise ValueError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Parameter] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if isinstance(inp, Parameter):
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, param in leaves.items():
        g = grads.get(key)
        if g is not None:
            param.grad += g.astype(param.grad.dtype, copy=False)
