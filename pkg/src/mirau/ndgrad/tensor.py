"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors are recorded on
the active :class:`GradTape` (if any input requires a gradient), and
``tape.backward(loss)`` replays the recorded backward closures in reverse
order. Outside a recording tape every op is a plain numpy computation.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible shapes."""


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class GradTape:
    """Ordered op record plus the dropout randomness for one forward/backward pair.

    ``seed`` and ``pass_index`` fully determine every dropout mask drawn under
    this tape; the k-th dropout call uses a generator keyed on
    ``(seed, pass_index, k)``. With ``record=False`` nothing is recorded and
    the tape only serves as an RNG source (inference, MC passes).
    ``sample_dropout=True`` makes dropout layers sample even in eval mode.
    """

    def __init__(self, seed: int = 0, pass_index: int = 0, record: bool = True,
                 sample_dropout: bool = False):
        self.seed = int(seed)
        self.pass_index = int(pass_index)
        self.record = record
        self.sample_dropout = sample_dropout
        self.ops: list[Tensor] = []
        self._draws = 0
        self._prev: Optional[GradTape] = None

    def __enter__(self) -> "GradTape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def dropout_rng(self) -> np.random.Generator:
        rng = np.random.default_rng([self.seed, self.pass_index, self._draws])
        self._draws += 1
        return rng

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward on a non-scalar tensor needs an explicit grad")
            grad = np.ones_like(loss.data)
        if not loss.requires_grad:
            return
        loss.grad = np.asarray(grad, dtype=loss.data.dtype).reshape(loss.shape)
        for node in reversed(self.ops):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            node.grad = None  # interior grads are not kept
        self.ops.clear()


def current_tape() -> Optional[GradTape]:
    return getattr(_state, "tape", None)


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording while keeping the active tape's RNG."""
    tape = current_tape()
    if tape is None:
        yield
        return
    prev = tape.record
    tape.record = False
    try:
        yield
    finally:
        tape.record = prev


def _check_finite(data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced non-finite values")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def make(data: np.ndarray, parents: Sequence["Tensor"],
         backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
    """Wrap an op result, recording it when a parent needs a gradient.

    ``backward`` maps the output gradient to one gradient per parent (or None).
    """
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._backward = None
    tape = current_tape()
    if tape is not None and tape.record and any(p.requires_grad for p in parents):
        out.requires_grad = True

        def run(g: np.ndarray) -> None:
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = unbroadcast(pg, p.data.shape)
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg

        out._backward = run
        tape.ops.append(out)
    return out


def as_tensor(x: ArrayLike, dtype=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tensor:
    """N-dimensional float array taking part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" \
                else default_dtype()
        self.data = np.array(data, dtype=dtype)
        _check_finite(self.data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else \
            float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("backward() needs the recording tape to be active")
        tape.backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def _coerce(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        o = self._coerce(other)
        return make(self.data + o.data, (self, o), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        o = self._coerce(other)
        return make(self.data - o.data, (self, o), lambda g: (g, -g))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        o = self._coerce(other)
        a, b = self.data, o.data
        return make(a * b, (self, o), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        o = self._coerce(other)
        a, b = self.data, o.data
        return make(a / b, (self, o), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        return make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return make(a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, self._coerce(other))

    # -- elementwise ------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return make(out, (self,), lambda g: (g * (1 - out * out),))

    def abs(self) -> "Tensor":
        a = self.data
        return make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return make(np.clip(a, lo, hi), (self,), lambda g: (g * inside,))

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else \
            int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            idx = idx.data
        shape, dtype = self.shape, self.dtype
        parts = idx if isinstance(idx, tuple) else (idx,)
        advanced = any(isinstance(i, (np.ndarray, list)) for i in parts)

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return make(np.array(self.data[idx]), (self,), back)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    x, y = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return make(x @ y, (a, b), back)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concatenate([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors],
                       axis=axis)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    return make(np.where(cond, a.data, b.data), (a, b),
                lambda g: (np.where(cond, g, 0), np.where(cond, 0, g)))


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back_shift = tuple(-s for s in shifts)
    return make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back_shift, axes),))


def pad(x: Tensor, widths: Sequence[tuple]) -> Tensor:
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(lo, n + lo) for (lo, _), n in zip(widths, x.shape))
    return make(np.pad(x.data, widths), (x,), lambda g: (g[sl],))
