"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the lab's networks need are provided. Each ``Tensor``
records its parents and a closure that pushes its gradient to them;
``backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

_scope: contextvars.ContextVar[str] = contextvars.ContextVar("scope", default="")
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class NonFiniteError(FloatingPointError):
    def __init__(self, scope: str, message: str = ""):
        self.scope = scope
        super().__init__(message or f"non-finite values produced in layer {scope or '<root>'!r}")


@contextlib.contextmanager
def scope(name: str):
    """Name the layer that subsequent operations belong to (nested with dots)."""
    parent = _scope.get()
    token = _scope.set(f"{parent}.{name}" if parent else name)
    try:
        yield
    finally:
        _scope.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "scope", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.scope = _scope.get()
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, scope={self.scope!r})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.value.dtype)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes of the graph below ``root`` in forward (topological) order."""
    return _topo_order(root)


def const(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward_fn) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, parents, backward_fn, requires_grad=True)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out_value = a.value + b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out_value = a.value - b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out_value = a.value * b.value

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(out_value, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching; ``b`` may be a 2-D weight shared by all batches."""
    a, b = _wrap(a), _wrap(b)
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one GEMM instead of numpy's per-batch loop
        out_value = (a.value.reshape(-1, a.shape[-1]) @ b.value).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out_value = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.value.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
            _accumulate(a, ga)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    return _make(out_value, (a, b), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_value, (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out_value = a.value.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _make(out_value, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_value = a.value.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_value, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_value = np.swapaxes(a.value, ax1, ax2)

    def backward(g):
        _accumulate(a, np.swapaxes(g, ax1, ax2))

    return _make(out_value, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    out_value = a.value[idx]

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(out_value, (a,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    indices = np.asarray(indices)
    out_value = np.take(a.value, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accumulate(a, full)

    return _make(out_value, (a,), backward)


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    out_value = np.repeat(a.value, repeats, axis=axis)

    def backward(g):
        shape = list(a.shape)
        shape.insert(axis + 1, repeats)
        _accumulate(a, g.reshape(shape).sum(axis=axis + 1))

    return _make(out_value, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _make(out_value, tensors, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out_value = np.broadcast_to(a.value, shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _make(out_value, (a,), backward)


def square(a: Tensor) -> Tensor:
    out_value = a.value * a.value

    def backward(g):
        _accumulate(a, 2.0 * a.value * g)

    return _make(out_value, (a,), backward)


def rsqrt(a: Tensor) -> Tensor:
    out_value = 1.0 / np.sqrt(a.value)

    def backward(g):
        _accumulate(a, -0.5 * g * out_value**3)

    return _make(out_value, (a,), backward)


def silu(a: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out_value = a.value * sig

    def backward(g):
        _accumulate(a, g * sig * (1.0 + a.value * (1.0 - sig)))

    return _make(out_value, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_value = np.tanh(a.value)

    def backward(g):
        _accumulate(a, g * (1.0 - out_value**2))

    return _make(out_value, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, out_value * (g - (g * out_value).sum(axis=axis, keepdims=True)))

    return _make(out_value, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(square(centered), axis=-1, keepdims=True)
    return centered * rsqrt(var + eps) * gain + bias


def first_non_finite(root: Tensor) -> Tensor | None:
    for node in graph_nodes(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None
