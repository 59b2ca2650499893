"""Reverse-mode automatic differentiation over float64 numpy storage.

Every trainable quantity in the package flows through :class:`Tensor`.
The design is a plain dynamic tape: each operation returns a new tensor
that remembers its parents and a closure that scatters the incoming
gradient back to them.  ``backward`` walks the recorded graph once, in
reverse topological order, and *accumulates* into ``.grad``; gradients
are cleared by the optimizer step, not by backward itself.  Calling
backward twice on the same graph therefore doubles every gradient.

Tensors are finite by contract: any operation whose result contains NaN
or Inf raises :class:`~promptmim.errors.NonFiniteError` immediately.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
)

# Floor used in norm denominators (cosine similarity, layer norm, l2 normalize).
EPS = 1e-8

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional float64 array participating in differentiation.

    Attributes:
        data: row-major float64 numpy array holding the values.
        grad: same-shape gradient buffer, or None when no gradient has
            been accumulated since the last optimizer step.
        requires_grad: whether backward should deposit a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # keeps 0-d shapes intact
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __float__(self) -> float:
        return self.item()

    # -- operator sugar ------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Deposit a gradient contribution for ``t`` into the active pass buffer."""
    if not t.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    buffers = getattr(_local, "pass_grads", None)
    if buffers is None:
        raise ContractError("gradient flow outside a backward pass")
    key = id(t)
    if key in buffers:
        buffers[key] = buffers[key] + grad
    else:
        buffers[key] = np.array(grad, dtype=np.float64)


# -- graph ---------------------------------------------------------------


def trace(root: Tensor) -> list[Tensor]:
    """Record of operations reaching ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires_grad tensor reachable from ``loss``.

    The loss must be a scalar connected to at least one differentiable
    tensor.  Each call computes the gradients of this one pass and adds
    them into ``.grad``: a second backward on the same graph therefore
    doubles every gradient.  The optimizer step clears the buffers.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any differentiable tensor")
    graph = trace(loss)
    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    _local.pass_grads = buffers
    try:
        for node in reversed(graph):
            incoming = buffers.get(id(node))
            if incoming is not None and node._backward is not None:
                node._backward(incoming)
    finally:
        _local.pass_grads = None
    for node in graph:
        incoming = buffers.get(id(node))
        if incoming is not None and node.requires_grad:
            node.grad = incoming if node.grad is None else node.grad + incoming


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out_data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("division produced non-finite values")

    def backward_fn(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _result(out_data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward_fn)


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out_data = a.data**p

    def backward_fn(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result(out_data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("log produced non-finite values")

    def backward_fn(g):
        _accumulate(a, g / a.data)

    return _result(out_data, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("sqrt produced non-finite values")

    def backward_fn(g):
        _accumulate(a, g * 0.5 / out_data)

    return _result(out_data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), backward_fn)


def maximum_const(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, floor), (a,), backward_fn)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise DimensionError("matmul does not take scalars")
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise DimensionError("matmul supports 1-D and 2-D operands only")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward_fn(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # dot product, g scalar
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)
        elif ad.ndim == 1:  # (k,) @ (k,m) -> (m,)
            _accumulate(a, bd @ g)
            _accumulate(b, np.outer(ad, g))
        elif bd.ndim == 1:  # (n,k) @ (k,) -> (n,)
            _accumulate(a, np.outer(g, bd))
            _accumulate(b, ad.T @ g)
        else:
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)

    return _result(out_data, (a, b), backward_fn)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("dot requires two vectors")
    return matmul(a, b)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose requires a 2-D tensor")

    def backward_fn(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), backward_fn)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(out_data.copy(), (a,), backward_fn)


def take_rows(a, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices accumulate gradient."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("take_rows requires a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take_rows requires a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError("take_rows index out of range")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _result(a.data[idx].copy(), (a,), backward_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    a = as_tensor(a)
    if not 0 <= axis < a.data.ndim:
        raise DimensionError("narrow axis out of range")
    if start < 0 or length < 1 or start + length > a.data.shape[axis]:
        raise DimensionError("narrow slice out of range")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _result(a.data[sl].copy(), (a,), backward_fn)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat requires at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward_fn(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(sl)])
            offset += n

    return _result(out_data, tuple(parts), backward_fn)


def stack_rows(tensors: Iterable[Tensor]) -> Tensor:
    """Stack a sequence of equal-length vectors into a matrix."""
    rows = [reshape(as_tensor(t), (1, -1)) for t in tensors]
    return concat(rows, axis=0)


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _result(out_data, (a,), backward_fn)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- composite operations -----------------------------------------------------


def softmax(logits, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis.

    The max along the axis is subtracted as a constant, which leaves both
    the value and the gradient of the softmax unchanged.
    """
    t = as_tensor(logits)
    if t.data.ndim == 0:
        raise DimensionError("softmax requires at least one axis")
    if t.data.shape[axis] == 0:
        raise DimensionError("softmax axis is empty")
    shift = Tensor(np.max(t.data, axis=axis, keepdims=True))
    z = exp(sub(t, shift))
    return div(z, sum_(z, axis=axis, keepdims=True))


def log_softmax(logits, axis: int = -1) -> Tensor:
    t = as_tensor(logits)
    if t.data.ndim == 0 or t.data.shape[axis] == 0:
        raise DimensionError("log_softmax requires a nonempty axis")
    shift = Tensor(np.max(t.data, axis=axis, keepdims=True))
    z = sub(t, shift)
    return sub(z, log(sum_(exp(z), axis=axis, keepdims=True)))


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along ``axis`` with an epsilon-guarded denominator."""
    t = as_tensor(a)
    norm_sq = sum_(mul(t, t), axis=axis, keepdims=True)
    return div(t, sqrt(add(norm_sq, EPS * EPS)))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError("cosine similarity requires two vectors of equal length")
    if np.linalg.norm(a.data) < 1e-12 or np.linalg.norm(b.data) < 1e-12:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    num = sum_(mul(a, b))
    denom_sq = mul(
        add(sum_(mul(a, a)), EPS * EPS),
        add(sum_(mul(b, b)), EPS * EPS),
    )
    return div(num, sqrt(denom_sq))


def layer_norm(x, gain, bias, eps: float = EPS) -> Tensor:
    """Normalize the last dimension to zero mean and unit variance, then affine.

    Rows whose variance falls below ``eps`` are scaled by the epsilon floor
    instead of their true variance (constant rows map to the bias).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.shape[-1] < 2:
        raise DimensionError("layer norm requires a last dimension of size >= 2")
    centered = sub(x, mean_(x, axis=-1, keepdims=True))
    var = mean_(mul(centered, centered), axis=-1, keepdims=True)
    normalized = div(centered, sqrt(maximum_const(var, eps)))
    return add(mul(normalized, gain), bias)
