"""Dense tensors with a reverse-mode computation tape.

Every differentiable primitive in :mod:`matrn.functional` appends one record
``(output, inputs, backward_fn)`` to the tape of the current thread. Calling
:func:`backward` on a scalar replays the tape in reverse, hands each record
the gradient of its output and accumulates what it returns into the inputs.
The tape is cleared afterwards, so every training step starts empty.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, UsageError

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = []
        _state.enabled = True
        _state.anomaly = False
    return _state


class Tensor:
    """An n-dimensional float array with an optional gradient.

    ``data`` is a numpy array (float32 or float64). ``grad`` has the same shape
    once a backward pass has reached the tensor.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    # -- structural properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        """Same values, cut from the tape (stop-gradient)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar, all routed through functional -------------------------
    def __add__(self, other):
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return F.div(self, other)

    def __neg__(self):
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return F.transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


def record(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` in a tensor and log the op if any input needs a gradient."""
    st = _tls()
    if st.anomaly and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by {op}")
    needs = st.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        st.tape.append(_Record(out, tuple(inputs), backward_fn, op))
    return out


def tape_length() -> int:
    return len(_tls().tape)


def tape_ops() -> list[str]:
    return [r.op for r in _tls().tape]


def clear_tape() -> None:
    _tls().tape.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    st = _tls()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NumericError` as soon as any op produces NaN or Inf."""
    st = _tls()
    prev = st.anomaly
    st.anomaly = enabled
    try:
        yield
    finally:
        st.anomaly = prev


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} contains NaN or Inf")
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor on the tape that leads to ``loss``.

    Leaf gradients accumulate (call ``zero_grad`` between steps); gradients of
    intermediate tensors are overwritten. The tape is cleared on return.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() on a tensor that does not require grad (empty tape)")
    st = _tls()
    tape = st.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for rec in reversed(tape):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            in_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = t
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
    finally:
        tape.clear()


from . import functional as F  # noqa: E402
