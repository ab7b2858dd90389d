"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a backward closure written in terms of other
primitives, so a backward pass run with ``create_graph=True`` is itself
differentiable (reverse-over-reverse). With ``create_graph=False`` the same
closures run under :func:`no_grad` and cost about as much as plain numpy.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = {"grad": True, "check": True}

Backward = Callable[["Tensor", tuple], tuple]


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a forward value or a gradient."""


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = _STATE["grad"]
    _STATE["grad"] = bool(flag)
    try:
        yield
    finally:
        _STATE["grad"] = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _STATE["grad"]


@contextlib.contextmanager
def finite_checks(flag: bool):
    """Toggle the per-op finiteness check (on by default)."""
    prev = _STATE["check"]
    _STATE["check"] = bool(flag)
    try:
        yield
    finally:
        _STATE["check"] = prev


def _check(arr: np.ndarray, op: str) -> None:
    if _STATE["check"] and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Tensor:
    """A float64 array plus the information needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} constructed with NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection -----------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return _const(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        leaves = [n for n in _toposort(self) if not n._parents and n.requires_grad]
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _const(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr if isinstance(arr, np.ndarray) and arr.dtype == np.float64 else np.asarray(arr, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t.name = None
    t.op = "const"
    t._parents = ()
    t._backward = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else _const(x)


def _node(data: np.ndarray, parents: tuple, backward: Backward, op: str) -> Tensor:
    _check(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.name = None
    t.op = op
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def back(g, needs):
        return (broadcast_to(g, x.shape),)

    return _node(_sum_to_array(x.data, shape), (x,), back, "sum_to")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def back(g, needs):
        return (sum_to(g, x.shape),)

    return _node(np.broadcast_to(x.data, shape), (x,), back, "broadcast_to")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    if data.shape == x.shape:
        return x

    def back(g, needs):
        return (reshape(g, x.shape),)

    return _node(data, (x,), back, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def back(g, needs):
        return (transpose(g, inv),)

    return _node(x.data.transpose(axes), (x,), back, "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    a1, a2 = a1 % x.ndim, a2 % x.ndim
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    def back(g, needs):
        return (index_put(g, idx, x.shape),)

    return _node(x.data[idx], (x,), back, "getitem")


def index_put(g: Tensor, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``idx`` (adjoint of indexing)."""
    out = np.zeros(shape)
    if _is_basic_index(idx):
        out[idx] = g.data
    else:
        np.add.at(out, idx, g.data)

    def back(gg, needs):
        return (getitem(gg, idx),)

    return _node(out, (g,), back, "index_put")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _node(data, tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _node(a.data - b.data, (a, b), back, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g, needs):
        return (neg(g),)

    return _node(-a.data, (a,), back, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(mul(g, div(a, mul(b, b)))), b.shape) if needs[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), back, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def back(g, needs):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _node(a.data ** p, (a,), back, "pow")


def matmul(a, b) -> Tensor:
    """Batched matrix product; a 2-D right operand is folded into one GEMM."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    folded = b.ndim == 2 and a.ndim > 2
    if folded:
        data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        data = a.data @ b.data

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            if folded:
                a2 = reshape(a, (-1, a.shape[-1]))
                gb = matmul(transpose(a2, (1, 0)), reshape(g, (-1, g.shape[-1])))
            else:
                gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    data = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def back(g, needs):
        return (broadcast_to(reshape(g, kshape), x.shape),)

    return _node(data, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def back(g, needs):
        yt = exp(x) if _STATE["grad"] else _const(y)
        return (mul(g, yt),)

    return _node(y, (x,), back, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)

    def back(g, needs):
        return (div(g, x),)

    return _node(y, (x,), back, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)

    def back(g, needs):
        yt = sqrt(x) if _STATE["grad"] else _const(y)
        return (div(mul(g, 0.5), yt),)

    return _node(y, (x,), back, "sqrt")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def back(g, needs):
        yt = tanh(x) if _STATE["grad"] else _const(y)
        return (mul(g, sub(1.0, mul(yt, yt))),)

    return _node(y, (x,), back, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)

    def back(g, needs):
        return (mul(g, _const(mask)),)

    return _node(x.data * mask, (x,), back, "relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def back(g, needs):
        return (mul(g, _const(sign)),)

    return _node(np.abs(x.data), (x,), back, "abs")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_A * (xd * xd * xd)))
    y = 0.5 * xd * (1.0 + t)

    def back(g, needs):
        if _STATE["grad"]:
            tt = tanh(mul(_GELU_C, add(x, mul(_GELU_A, power(x, 3.0)))))
            inner = mul(_GELU_C, add(1.0, mul(3.0 * _GELU_A, mul(x, x))))
            d = add(mul(0.5, add(1.0, tt)), mul(mul(0.5, x), mul(sub(1.0, mul(tt, tt)), inner)))
        else:
            inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            d = _const(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * inner)
        return (mul(g, d),)

    return _node(y, (x,), back, "gelu")


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------

def _softmax_np(a: np.ndarray, axis: int) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    y = _softmax_np(x.data, axis)

    def back(g, needs):
        yt = softmax(x, axis) if _STATE["grad"] else _const(y)
        return (mul(yt, sub(g, tsum(mul(g, yt), axis, keepdims=True))),)

    return _node(y, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g, needs):
        p = softmax(x, axis) if _STATE["grad"] else _const(np.exp(y))
        return (sub(g, mul(p, tsum(g, axis, keepdims=True))),)

    return _node(y, (x,), back, "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part); eps sits inside the sqrt."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def back(g, needs):
        if _STATE["grad"]:
            xct = sub(x, mean(x, -1, keepdims=True))
            rs = power(add(mean(mul(xct, xct), -1, keepdims=True), eps), -0.5)
            yt = mul(xct, rs)
        else:
            yt, rs = _const(y), _const(rstd)
        gm = mean(g, -1, keepdims=True)
        gym = mean(mul(g, yt), -1, keepdims=True)
        return (mul(sub(sub(g, gm), mul(yt, gym)), rs),)

    return _node(y, (x,), back, "layer_norm")


# ---------------------------------------------------------------------------
# lookups
# ---------------------------------------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def back(g, needs):
        return (scatter_rows(g, ids, n),)

    return _node(weight.data[ids], (weight,), back, "embedding")


def scatter_rows(g: Tensor, ids: np.ndarray, num_rows: int) -> Tensor:
    width = g.shape[-1]
    out = np.zeros((num_rows, width))
    np.add.at(out, ids.reshape(-1), g.data.reshape(-1, width))

    def back(gg, needs):
        return (embedding(gg, ids),)

    return _node(out, (g,), back, "scatter_rows")


# ---------------------------------------------------------------------------
# reverse-mode driver
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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


Rule = Callable[[Tensor, Tensor, tuple], "tuple | None"]


def backprop(
    output: Tensor,
    seed: Tensor,
    wrt: Sequence[Tensor],
    *,
    create_graph: bool = False,
    allow_unused: bool = False,
    rule: Rule | None = None,
) -> list:
    """Propagate ``seed`` (the adjoint of ``output``) back to the ``wrt`` tensors.

    ``rule(node, g, needs)`` may return replacement parent adjoints for a node
    (used by DeepLift); returning None falls back to the node's own backward.
    """
    wrt = list(wrt)
    order = _toposort(output) if output.requires_grad else []
    wrt_ids = {id(t) for t in wrt}
    relevant: set = set()
    for node in order:
        if id(node) in wrt_ids or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))
    present = {id(n) for n in order}
    for t in wrt:
        if id(t) not in present and not allow_unused:
            label = t.name or repr(t)
            raise ValueError(f"{label} is not part of the graph of the output")

    adj = {id(output): as_tensor(seed)} if order else {}
    found: dict = {}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wrt_ids:
                found[id(node)] = g
            if not node._parents:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            if not any(needs):
                continue
            grads = rule(node, g, needs) if rule is not None else None
            if grads is None:
                grads = node._backward(g, needs)
            for p, need, gp in zip(node._parents, needs, grads):
                if need and gp is not None:
                    k = id(p)
                    adj[k] = add(adj[k], gp) if k in adj else gp

    out = []
    for t in wrt:
        g = found.get(id(t))
        if g is None:
            g = _const(np.zeros(t.shape))
        elif g.shape != t.shape:
            g = broadcast_to(g, t.shape)
        if not np.isfinite(g.data).all():
            raise NonFiniteError(f"non-finite gradient for {t.name or repr(t)}")
        out.append(g)
    return out


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    *,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    ``wrt`` may contain leaves or intermediate nodes. Raises ValueError when
    the output is not a scalar or a requested tensor is not in the graph.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    seed = _const(np.ones(output.shape))
    return backprop(output, seed, list(wrt), create_graph=create_graph, allow_unused=allow_unused)
