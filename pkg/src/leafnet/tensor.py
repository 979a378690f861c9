"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a contiguous row-major numpy array. Every differentiable op records a
``Node`` on its output holding the inputs and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` replays the nodes in reverse
topological order once and then releases them.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError, StateError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    """One tape entry: the op that produced a tensor."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}, consumed={self.consumed})"


class Tensor:
    """n-dimensional float array with an optional gradient.

    ``data`` is float32 unless ``dtype`` (or the ambient default dtype) says
    otherwise. ``grad`` is populated by :meth:`backward` and accumulates across
    calls until cleared with :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d input to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._node: Optional[Node] = None

    # basic properties

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    # arithmetic sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    # differentiation

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every requires-grad ancestor.

        ``self`` must hold a single value unless an explicit upstream ``grad`` is
        given. The tape is consumed: a second call on the same graph raises
        :class:`StateError`.
        """
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            seed = np.ones(self.shape, dtype=self.dtype)
        else:
            seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=self.dtype)
            if seed.shape != self.shape:
                raise ShapeError(f"upstream grad shape {seed.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): seed}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            _accumulate(t, g)
            node = t._node
            if node is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for t in order:
            node = t._node
            if node is not None:
                node.consumed = True
                node.inputs = ()
                node.backward_fn = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = Tensor(g.copy(), dtype=t.dtype)
    else:
        t.grad.data = t.grad.data + g


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        node = t._node
        if node is not None and node.consumed:
            raise StateError(
                f"tape for op '{node.op}' was already consumed by an earlier backward()"
            )
        stack.append((t, True))
        if node is not None:
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by '{op}'")


def make_result(
    op: str,
    out: np.ndarray,
    inputs: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap a forward result, recording a tape node if any input needs grad.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    _check_finite(op, out)
    inputs = tuple(inputs)
    result = Tensor(out, dtype=out.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, inputs, backward_fn)
    return result


def _binary_operands(a: ArrayLike, b: ArrayLike) -> tuple:
    if isinstance(a, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def broadcast_shape(shape_a: tuple, shape_b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(shape_a, shape_b)
    except ValueError:
        raise ShapeError(f"shapes {shape_a} and {shape_b} are not broadcast-compatible") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    return make_result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    return make_result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_result(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by exact zero")
    return make_result(
        "div",
        ad / bd,
        (a, b),
        lambda g: (unbroadcast(g / bd, a.shape), unbroadcast(-g * ad / (bd * bd), b.shape)),
    )


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; at exact ties the gradient is split evenly."""
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        share_a = (ad > bd) + 0.5 * (ad == bd)
        return unbroadcast(g * share_a, a.shape), unbroadcast(g * (1.0 - share_a), b.shape)

    return make_result("max", np.maximum(ad, bd), (a, b), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(op: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    return fn(a, b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log of a non-positive value")
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = x.shape
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes).copy()
    return make_result("transpose", out, (x,), lambda g: (g.transpose(inverse),))


def flatten(x: Tensor, start_dim: int = 1) -> Tensor:
    return reshape(x, x.shape[:start_dim] + (-1,))


# reductions


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if ndim == 0 and ax in (0, -1):
            continue
        if not -ndim <= ax < ndim:
            raise IndexError(f"axis {ax} out of range for tensor of rank {ndim}")
        axes.append(ax % ndim)
    if len(set(axes)) != len(axes):
        raise IndexError(f"repeated axis in {tuple(axis)}")
    return tuple(sorted(axes))


def reduce(op: str, t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (None means every axis)."""
    t = as_tensor(t)
    axes = _normalize_axes(axis, t.ndim)
    src_shape = t.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(src_shape))
    xd = t.data

    if op == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape), src_shape).copy(),)

    elif op == "mean":
        count = int(np.prod([src_shape[i] for i in axes])) if axes else 1
        if count == 0:
            raise ContractError("mean over an empty extent")
        out = xd.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, src_shape).copy(),)

    elif op == "max":
        out = xd.max(axis=axes, keepdims=keepdims)

        def backward(g):
            peak = xd.max(axis=axes, keepdims=True)
            mask = (xd == peak).astype(xd.dtype)
            mask /= mask.sum(axis=axes, keepdims=True)
            return (g.reshape(kept_shape) * mask,)

    else:
        raise ContractError(f"unknown reduction '{op}'")
    out = np.asarray(out, dtype=xd.dtype)
    return make_result(op, out, (t,), backward)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)
