"""Reverse-mode automatic differentiation on numpy arrays.

Backward rules are written in terms of Tensor operations, so a gradient
computed with ``create_graph=True`` is itself differentiable. That is what the
derivative-penalized losses need (double backpropagation).
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(flag: bool):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, flag
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o)))

    def __rsub__(self, o):
        return add(as_tensor(o), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(o, dtype=float))

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _make(data, (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (sum_to(g, src),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b), lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2D operands")
    return _make(a.data @ b.data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def back(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = None

    def back(g):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    out = _make(expit(x.data), (x,), back)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (mul(g, sigmoid(x)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(float)
    return _make(x.data * mask, (x,), lambda g: (mul(g, mask),))


def identity(x) -> Tensor:
    return as_tensor(x)


ACTIVATIONS = {"softplus": softplus, "relu": relu, "linear": identity, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# indexing: mutually adjoint linear pairs


def gather_flat(x, idx: np.ndarray, out_shape=None) -> Tensor:
    """out.flat[k] = x.flat[idx[k]], or 0 where idx[k] < 0."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    flat = np.concatenate([x.data.ravel(), [0.0]])
    safe = np.where(idx < 0, flat.size - 1, idx)
    data = flat[safe]
    if out_shape is not None:
        data = data.reshape(out_shape)
    src = x.shape
    return _make(data, (x,), lambda g: (scatter_flat(g, idx, src),))


def scatter_flat(g, idx: np.ndarray, shape) -> Tensor:
    """Adjoint of gather_flat: out.flat[idx[k]] += g.flat[k]."""
    g = as_tensor(g)
    idx = np.asarray(idx, dtype=np.intp).ravel()
    size = int(np.prod(shape))
    keep = idx >= 0
    data = np.bincount(idx[keep], weights=g.data.ravel()[keep], minlength=size).reshape(shape)
    gshape = g.shape
    return _make(data, (g,), lambda h: (gather_flat(h, idx, gshape),))


def take_slice(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    full = x.shape
    return _make(x.data[tuple(sl)].copy(), (x,), lambda g: (embed_slice(g, axis, start, full),))


def embed_slice(g, axis: int, start: int, full_shape) -> Tensor:
    """Adjoint of take_slice: zero array of ``full_shape`` with g placed at start."""
    g = as_tensor(g)
    data = np.zeros(full_shape)
    sl = [slice(None)] * len(full_shape)
    stop = start + g.shape[axis]
    sl[axis] = slice(start, stop)
    data[tuple(sl)] = g.data
    return _make(data, (g,), lambda h: (take_slice(h, axis, start, stop),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(take_slice(g, axis, int(bounds[k]), int(bounds[k + 1])) for k in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def index(x, key) -> Tensor:
    """Basic/advanced numpy indexing routed through gather_flat."""
    x = as_tensor(x)
    pos = np.arange(x.size).reshape(x.shape)[key]
    return gather_flat(x, pos.ravel(), pos.shape)


def take_rows(x, rows: np.ndarray) -> Tensor:
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    inner = int(np.prod(x.shape[1:]))
    idx = (rows[:, None] * inner + np.arange(inner)[None, :]).ravel()
    return gather_flat(x, idx, (len(rows), *x.shape[1:]))


# ---------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(output: Tensor, inputs, grad_output=None, create_graph: bool = False, allow_unused: bool = True):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors carry their own graph and can be
    differentiated again.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        grad_output = Tensor(np.ones_like(output.data))
    order = _topo(output) if output.requires_grad else []
    targets = {id(t) for t in inputs}
    relevant = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))
    grads = {id(output): as_tensor(grad_output)}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None or id(node) not in relevant:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise ValueError("an input does not influence the output")
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out[0] if single else out
