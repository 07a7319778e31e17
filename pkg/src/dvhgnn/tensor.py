"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input takes part
in differentiation, records a node holding the parents and a closure that maps
the output gradient to one gradient per parent.  ``Tensor.backward`` walks the
recorded DAG once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf.

    ``where`` is filled in by callers further up (layer names) as the error
    propagates, so the final message pinpoints the offending layer.
    """

    def __init__(self, op: str, where: str = ""):
        self.op = op
        self.where = where
        super().__init__(self._message())

    def _message(self) -> str:
        loc = f" in {self.where}" if self.where else ""
        return f"non-finite values produced by {self.op}{loc}"

    def located(self, where: str) -> "NonFiniteError":
        if not self.where:
            self.where = where
            self.args = (self._message(),)
        return self


class _GradMode:
    # Process-wide on purpose: worker threads computing heads must honour the
    # caller's no_grad() scope.
    enabled = True


_grad_mode = _GradMode()

# Names of ops whose backward rule is deliberately perturbed (fault injection
# for the gradient checker's self-test).
_corrupted: set = set()


@contextlib.contextmanager
def no_grad():
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


@contextlib.contextmanager
def corrupt_backward(op: str):
    """Scale the backward rule of ``op`` by 1.5 while the context is active."""
    _corrupted.add(op)
    try:
        yield
    finally:
        _corrupted.discard(op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---------------------------------------------------------------- autodiff
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            if node._op in _corrupted:
                parent_grads = tuple(None if pg is None else 1.5 * pg for pg in parent_grads)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result("div", out, (a, b), backward)


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient flows only where a > floor."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    return _result("maximum", out, (a,), lambda g: (g * (a.data > floor),))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    return _result("clip", out, (a,), lambda g: (g * ((a.data >= lo) & (a.data <= hi)),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # special.expit is exact at 0 (0.5) and stable at both tails
    return special.expit(x)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: ArrayLike) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT_2))
    out = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result("gelu", out, (a,), backward)


# ------------------------------------------------------------------ reductions
def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------- shapes
def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: ArrayLike, index) -> Tensor:
    """numpy-style indexing; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("index", np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result("stack", out, tensors, backward)


def pad2d(a: ArrayLike, bottom: int, right: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes on the bottom/right."""
    a = as_tensor(a)
    if bottom == 0 and right == 0:
        return a
    widths = [(0, bottom), (0, right)] + [(0, 0)] * (a.ndim - 2)
    out = np.pad(a.data, widths)
    h, w = a.shape[:2]
    return _result("pad", out, (a,), lambda g: (g[:h, :w].copy(),))


# --------------------------------------------------------------------- matmul
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), backward)
