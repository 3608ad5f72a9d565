"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and an analytic ``backward``. Graphs are built on the fly while
operations run and are released by :func:`backward`.

Precision and gradient recording are per-thread settings, so independent
graphs may be built on separate threads.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ContractError,
    DegenerateDistributionError,
    DimensionError,
    NonFiniteError,
    OracleInvalidError,
)

# Stand-in for -inf in additive attention masks.
MASK_SENTINEL = -1e9

_state = threading.local()
_node_ids = itertools.count(1)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the compute precision of the current thread."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _check_finite(values: np.ndarray, where: str) -> None:
    if values.dtype.kind == "f" and not np.isfinite(values).all():
        raise NonFiniteError(f"{where} produced non-finite values")


class Tensor:
    """A dense array that may take part in a computation graph."""

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(values, Tensor):
            values = values.data
        data = np.array(values, dtype=dtype or get_default_dtype())
        _check_finite(data, "Tensor construction")
        self._init(data, requires_grad, name)

    def _init(self, data: np.ndarray, requires_grad: bool, name: Optional[str]) -> None:
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._ctx: Optional[Function] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._init(data, requires_grad, name)
        return tensor

    # --- introspection ---
    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def key(self) -> str:
        """Identifier used in gradient tables."""
        return self.name or f"tensor:{self.node_id}"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{extra}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- arithmetic ---
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # --- reductions and shape ---
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    def swapaxes(self, first: int, second: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[first], axes[second] = axes[second], axes[first]
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    # --- elementwise ---
    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def stop_gradient(tensor: Tensor) -> Tensor:
    """Return a graph-less view of ``tensor``; nothing behind it receives gradient."""
    return Tensor._wrap(tensor.data, False, tensor.name)


class Function:
    """One differentiable operation and the values its backward pass needs."""

    def __init__(self):
        self.parents: Tuple[Tensor, ...] = ()
        self.saved: tuple = ()

    def save(self, *values) -> None:
        self.saved = values

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(value) for value in inputs)
        fn = cls()
        out = np.asarray(fn.forward(*(t.data for t in tensors), **kwargs))
        _check_finite(out, cls.__name__)
        track = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor._wrap(out, track)
        if track:
            fn.parents = tensors
            result._ctx = fn
        return result

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _normalize_axis(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Add(Function):
    def forward(self, a, b):
        self.save(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.save(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.save(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Function):
    def forward(self, a, b):
        self.save(a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.save(a, exponent)
        return a ** exponent

    def backward(self, grad):
        a, exponent = self.saved
        return (grad * exponent * a ** (exponent - 1),)


class MatMul(Function):
    def forward(self, a, b):
        self.save(a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least two dimensions on both operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul batch dimensions do not broadcast", a.shape, b.shape) from None
    return MatMul.apply(a, b)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        axes = _normalize_axis(axis, a.ndim)
        self.save(a.shape, axes, keepdims)
        return np.sum(a, axis=axes, keepdims=keepdims)

    def backward(self, grad):
        shape, axes, keepdims = self.saved
        if axes is not None and not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        axes = _normalize_axis(axis, a.ndim)
        count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
        self.save(a.shape, axes, keepdims, count)
        return np.mean(a, axis=axes, keepdims=keepdims)

    def backward(self, grad):
        shape, axes, keepdims, count = self.saved
        if axes is not None and not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad / count, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.save(a.shape)
        return np.reshape(a, shape)

    def backward(self, grad):
        (shape,) = self.saved
        return (np.reshape(grad, shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.save(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        (axes,) = self.saved
        return (np.transpose(grad, np.argsort(axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.save(a.shape, a.dtype, index)
        return a[index]

    def backward(self, grad):
        shape, dtype, index = self.saved
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.save(axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis, sizes = self.saved
        return tuple(np.split(grad, np.cumsum(sizes)[:-1], axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.save(axis, len(arrays))
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        axis, count = self.saved
        return tuple(np.take(grad, i, axis=axis) for i in range(count))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.save(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out,)


class Log(Function):
    def forward(self, a):
        self.save(a)
        return np.log(a)

    def backward(self, grad):
        (a,) = self.saved
        return (grad / a,)


class Relu(Function):
    def forward(self, a):
        self.save(a > 0)
        return np.maximum(a, 0)

    def backward(self, grad):
        (positive,) = self.saved
        return (grad * positive,)


class Sigmoid(Function):
    def forward(self, a):
        positive = a >= 0
        safe = np.exp(-np.abs(a))
        out = np.where(positive, 1.0 / (1.0 + safe), safe / (1.0 + safe)).astype(a.dtype)
        self.save(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out * (1 - out),)


class Tanh(Function):
    def forward(self, a):
        out = np.tanh(a)
        self.save(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * (1 - out * out),)


def _as_additive_mask(mask, dtype) -> np.ndarray:
    values = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    values = np.where(np.isneginf(values), MASK_SENTINEL, values)
    return values.astype(dtype)


class Softmax(Function):
    def forward(self, a, mask=None):
        blocked = None
        if mask is not None:
            try:
                fits = np.broadcast_shapes(a.shape, mask.shape) == a.shape
            except ValueError:
                fits = False
            if not fits:
                raise DimensionError("softmax mask does not broadcast to its input", mask.shape, a.shape)
            blocked = np.broadcast_to(mask <= MASK_SENTINEL / 2, a.shape)
            if blocked.all(axis=-1).any():
                raise DegenerateDistributionError("softmax slice is masked at every position (empty attention context)")
            a = a + mask
        shifted = a - a.max(axis=-1, keepdims=True)
        weights = np.exp(shifted)
        out = weights / weights.sum(axis=-1, keepdims=True)
        if blocked is not None:
            out = np.where(blocked, 0.0, out).astype(a.dtype)
        self.save(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)


def softmax_lastdim(t: ArrayLike, additive_mask=None) -> Tensor:
    """Softmax over the last dimension after adding an optional 0 / -inf mask."""
    t = as_tensor(t)
    mask = None if additive_mask is None else _as_additive_mask(additive_mask, t.dtype)
    return Softmax.apply(t, mask=mask)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = shifted - log_norm
        self.save(np.exp(out))
        return out

    def backward(self, grad):
        (probs,) = self.saved
        return (grad - probs * grad.sum(axis=-1, keepdims=True),)


def log_softmax_lastdim(t: ArrayLike) -> Tensor:
    return LogSoftmax.apply(as_tensor(t))


class Normalize(Function):
    """Zero-mean, unit-variance normalization over the last dimension."""

    def forward(self, a, eps):
        centered = a - a.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        out = centered * inv_std
        self.save(out, inv_std)
        return out

    def backward(self, grad):
        out, inv_std = self.saved
        mean_grad = grad.mean(axis=-1, keepdims=True)
        mean_proj = (grad * out).mean(axis=-1, keepdims=True)
        return (inv_std * (grad - mean_grad - out * mean_proj),)


def normalize_lastdim(t: ArrayLike, eps: float = 1e-6) -> Tensor:
    return Normalize.apply(as_tensor(t), eps=float(eps))


class GradTable(dict):
    """Parameter identifier -> gradient tensor."""

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in self.values())))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    pending: List[Tuple[Tensor, bool]] = [(root, False)]
    while pending:
        node, expanded = pending.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        pending.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if id(parent) not in visited:
                    pending.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> GradTable:
    """Propagate gradients from a scalar ``loss`` to every trainable leaf.

    The graph behind ``loss`` is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    table = GradTable()
    for node in _topological_order(loss):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        ctx = node._ctx
        if ctx is None:
            if node.requires_grad:
                node.grad = grad
                table[node.key] = Tensor._wrap(grad)
            continue
        for parent, parent_grad in zip(ctx.parents, ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        node._ctx = None
    return table


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients of ``f`` at ``x``.

    Each element contributes ``|analytic - central| / (|analytic| + |central| + 1e-12)``;
    elements where both are exactly zero contribute nothing.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    base = np.array(x.data, copy=True)
    with no_grad():
        first = f(Tensor._wrap(base.copy())).data
        second = f(Tensor._wrap(base.copy())).data
    if not np.array_equal(first, second):
        raise OracleInvalidError("function returned different values for identical inputs")

    point = Tensor._wrap(base.copy(), True, "finite_diff_point")
    out = f(point)
    table = backward(out) if out.requires_grad else GradTable()
    analytic = table[point.key].data if point.key in table else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] += eps
            upper = float(f(Tensor._wrap(shifted.reshape(base.shape))).data.sum())
            shifted[i] -= 2 * eps
            lower = float(f(Tensor._wrap(shifted.reshape(base.shape))).data.sum())
            flat[i] = (upper - lower) / (2 * eps)
    gap = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(gap.max()) if gap.size else 0.0
