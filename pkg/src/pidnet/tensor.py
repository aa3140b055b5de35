"""Dense float tensors with tape-based reverse-mode autodiff.

Feature maps are row-major NCHW numpy arrays; scalars (losses) are rank-0.
Recording happens only while a Tape is active, so eval-mode forward passes
allocate no gradient state. Gradient accumulation walks the tape strictly
in reverse recording order, which fixes the reduction order and makes
backward results bit-reproducible for identical inputs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class TapeError(RuntimeError):
    """Raised on tape misuse (reuse after backward, wrong tape, nesting)."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"session dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the session float precision ('float32'/'float64')."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Array value plus optional gradient slot.

    trainable marks leaf parameters; intermediate results produced under an
    active tape are tracked automatically so gradients can flow through them.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_tape")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.trainable = trainable
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"


_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Usage::

        with Tape() as tape:
            loss = ...            # ops record themselves
        backward(loss, tape)      # single use; reuse raises TapeError
    """

    __slots__ = ("_nodes", "consumed")

    def __init__(self):
        self._nodes = []
        self.consumed = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a tape is already active; one logical writer at a time")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        output._tape = self
        self._nodes.append((inputs, output, backward_fn))


def active_tape() -> Tape | None:
    return _active_tape


def tracked(t: Tensor) -> bool:
    """True when t participates in the current recording."""
    return t.trainable or (t._tape is not None and t._tape is _active_tape)


def record(inputs, output, backward_fn) -> bool:
    """Record a node if a tape is active and any input is tracked.

    backward_fn(output_grad) must return one gradient array (or None) per
    input, in order. Returns whether the node was recorded.
    """
    tape = _active_tape
    if tape is None or not any(tracked(t) for t in inputs):
        return False
    tape.record(inputs, output, backward_fn)
    return True


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tracked tensor.

    Visits each recorded node exactly once, in reverse order. loss must be a
    scalar produced on this tape.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.ndim != 0:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced on the given tape")
    tape.consumed = True
    loss.grad = np.ones((), dtype=loss.dtype)
    for inputs, output, backward_fn in reversed(tape._nodes):
        g = output.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not (t.trainable or t._tape is tape):
                continue
            if t.grad is None:
                t.grad = gi.astype(t.dtype, copy=False)
            else:
                t.grad = t.grad + gi
