"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Differentiable operations record their
parents and a closure mapping the output gradient to parent gradients; calling
:meth:`Tensor.backward` on a scalar replays the graph in reverse topological
order. Leaf tensors created with ``requires_grad=True`` accumulate gradients
across backward calls until :meth:`Tensor.zero_grad`.

Every operation also reports its floating-point operation count to the global
:data:`COUNTER` when counting is enabled. Convention: one multiply-add pair is
two FLOPs, elementwise primitives are one FLOP per output element each, and
shape-only operations (reshape, slicing, concatenation) are free.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericOverflowError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class OpCounter:
    """Thread-safe FLOP accumulator with a per-operation breakdown."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.enabled = False
        self.flops = 0
        self.by_op: dict[str, int] = defaultdict(int)

    def add(self, op: str, flops: int) -> None:
        if not self.enabled or flops == 0:
            return
        with self._lock:
            self.flops += int(flops)
            self.by_op[op] += int(flops)

    def reset(self) -> None:
        with self._lock:
            self.flops = 0
            self.by_op = defaultdict(int)


COUNTER = OpCounter()


@contextlib.contextmanager
def counting(reset: bool = True):
    """Enable :data:`COUNTER` for the duration of the block."""
    if reset:
        COUNTER.reset()
    previous = COUNTER.enabled
    COUNTER.enabled = True
    try:
        yield COUNTER
    finally:
        COUNTER.enabled = previous


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff --------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: BackwardFn,
    op: str,
    flops: int = 0,
) -> Tensor:
    """Wrap the result of a primitive and record it on the graph."""
    COUNTER.add(op, flops)
    if np.issubdtype(data.dtype, np.floating) and not np.isfinite(data).all():
        raise NumericOverflowError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _operand(x):
    # python scalars stay weakly typed so float32 graphs are not promoted
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, (int, float)):
        return None, x
    t = Tensor(x)
    return t, t.data


def _binary(a, b, fn, grad_a, grad_b, op):
    ta, va = _operand(a)
    tb, vb = _operand(b)
    out = fn(va, vb)
    out = np.asarray(out)
    parents = [t for t in (ta, tb) if t is not None]

    def backward(g):
        grads = []
        if ta is not None:
            grads.append(unbroadcast(grad_a(g, va, vb, out), ta.shape))
        if tb is not None:
            grads.append(unbroadcast(grad_b(g, va, vb, out), tb.shape))
        return grads

    return apply(out, parents, backward, op, out.size)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(
        a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul"
    )


def div(a, b) -> Tensor:
    return _binary(
        a,
        b,
        np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
        "div",
    )


def _unary(x: Tensor, value: np.ndarray, local_grad, op: str, cost: int = 1) -> Tensor:
    x = as_tensor(x)
    return apply(value, (x,), lambda g: (g * local_grad(),), op, cost * value.size)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return apply(-x.data, (x,), lambda g: (-g,), "neg", x.size)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _unary(x, y, lambda: y, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _unary(x, y, lambda: 1.0 / x.data, "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _unary(x, y, lambda: y * (1.0 - y), "sigmoid", 3)


def silu(x) -> Tensor:
    """``x * sigmoid(x)``: four FLOPs per element (exp, add, div, mul)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    y = x.data * s
    return _unary(x, y, lambda: s * (1.0 + x.data * (1.0 - s)), "silu", 4)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    y = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0)
    return _unary(x, y, lambda: _sigmoid(v), "softplus", 3)


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0)
    return _unary(x, y, lambda: (x.data > 0).astype(x.dtype), "relu")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Records ``2*m*n*k`` FLOPs per matrix in the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    k = a.shape[-1]

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply(out, (a, b), backward, "matmul", 2 * out.size * k)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return apply(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return apply(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return apply(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return apply(out, tensors, backward, "stack")


def pad_rows(x, length: int) -> Tensor:
    """Zero-pad axis 0 of ``x`` up to ``length`` rows."""
    x = as_tensor(x)
    n = x.shape[0]
    if length < n:
        raise DimensionError(f"cannot pad {n} rows down to {length}")
    out = np.zeros((length,) + x.shape[1:], dtype=x.dtype)
    out[:n] = x.data
    return apply(out, (x,), lambda g: (g[:n],), "pad")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply(out, (x,), backward, "sum", x.size)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable boolean, True = keep) forces excluded entries to an
    exact zero weight. Every slice must keep at least one entry. Counted as
    four FLOPs per element (shift, exp, sum, divide).
    """
    x = as_tensor(x)
    v = x.data
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    with np.errstate(invalid="ignore"):
        shifted = v - np.max(v, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / np.sum(e, axis=axis, keepdims=True)
    if not np.isfinite(y).all():
        raise ContractError("softmax slice with every entry masked")

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return apply(y, (x,), backward, "softmax", 4 * y.size)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return apply(y, (x,), backward, "log_softmax", 4 * y.size)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply
    ``gain`` and ``bias``. Counted as seven FLOPs per element."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply(out, (x, gain, bias), backward, "layer_norm", 7 * out.size)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Returns ``x`` itself when inactive."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return apply(x.data * keep, (x,), lambda g: (g * keep,), "dropout", x.size)


def gather_rows(weight, ids) -> Tensor:
    """``weight[ids]`` for an integer id array (embedding lookup)."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return apply(out, (weight,), backward, "gather")


def pick(x, index: np.ndarray) -> Tensor:
    """Select ``x[..., index]`` along the last axis (one entry per row)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    lead = np.indices(index.shape)
    full_index = tuple(lead) + (index,)
    return getitem(x, full_index)
