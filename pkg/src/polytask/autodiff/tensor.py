"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a numpy array; every differentiable operation records an
entry on the currently active ``Tape``. Entries are appended in execution
order, which is by construction a topological order of the compute graph, so
``Tape.backward`` is a single reverse sweep that visits each entry exactly
once.

Design notes:
  * Gradients are only tracked while a tape is active. Evaluation code runs
    outside any tape and pays no bookkeeping cost.
  * Tensors are treated as immutable once recorded; parameter updates happen
    in-place but only between tapes (see the optimizer).
  * ``Tape.backward`` reports the set of tensors actually reached by the
    loss. Parameters outside that set received no gradient at all, which is
    distinct from a zero gradient; the optimizer relies on this to skip
    updates for unused parameters.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class Tensor:
    """Dense n-dimensional float array participating in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic operators delegate to the op catalog; imported lazily to
    # avoid a circular import at module load time.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class TapeEntry:
    """One executed op: input/output identities plus the local-gradient closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]],
    ):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPE: Optional["Tape"] = None


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPE


class Tape:
    """Ordered record of executed ops, in topological (execution) order."""

    def __init__(self):
        self._entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, entry: TapeEntry) -> None:
        self._entries.append(entry)

    def backward(self, loss: Tensor) -> set[Tensor]:
        """Reverse sweep from ``loss``; populates ``grad`` on reached tensors.

        Returns the set of tensors reached by the sweep (the loss itself
        excluded). Tensors with ``requires_grad`` outside this set keep
        ``grad is None``, which callers use to identify unused parameters.
        """
        if loss.size != 1 or loss.ndim != 0:
            raise ValueError("backward expects a scalar (0-d) loss tensor")
        reached: set[Tensor] = set()
        if not loss.requires_grad:
            return reached
        loss.grad = np.ones((), dtype=loss.dtype)
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            holders.pop(id(entry.output), None)
            needs = tuple(t.requires_grad for t in entry.inputs)
            if not any(needs):
                continue
            input_grads = entry.backward_fn(g_out, needs)
            for t, g in zip(entry.inputs, input_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = t
                reached.add(t)
        for key, t in holders.items():
            if t is loss:
                continue
            g = np.asarray(grads[key], dtype=t.dtype)
            if g.shape != t.data.shape:
                g = g.reshape(t.data.shape)
            t.grad = g if t.grad is None else t.grad + g
        return reached


def backward(tape: Tape, loss: Tensor) -> set[Tensor]:
    """Functional form of ``Tape.backward``."""
    return tape.backward(loss)


def record_op(
    op: str,
    inputs: Iterable,
    out_data: np.ndarray,
    backward_fn: Callable,
) -> Tensor:
    """Create the output tensor for an op, recording it if a tape is active."""
    tensor_inputs = tuple(t for t in inputs if isinstance(t, Tensor))
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in tensor_inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(TapeEntry(op, tensor_inputs, out, backward_fn))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap raw data as a non-differentiable Tensor (no-op for Tensors)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)
