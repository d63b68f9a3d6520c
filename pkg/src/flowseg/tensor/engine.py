"""Reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps an ``numpy.ndarray`` value and remembers the operation that
produced it (its parents and a backward closure).  The implicit graph of
parent links is the tape: ``backward(loss)`` walks it once in reverse
topological order and accumulates ``d loss / d value`` into ``.grad`` of every
reachable Var.  The tape belongs to the thread that built it; values
(numpy arrays) may be shared freely across threads.

Arithmetic follows numpy broadcasting; gradients of broadcast operands are
summed back to the operand's shape.  Default precision is float64, switchable
to float32 via ``set_default_dtype``.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.type not in _FLOAT_DTYPES:
        arr = arr.astype(_default_dtype)
    return arr


class Var:
    """A value in the differentiation tape.

    Leaf Vars are created directly from arrays; non-leaf Vars are produced by
    the ops in this module and carry a backward closure.  ``grad`` stays None
    until a backward pass reaches the Var.
    """

    __slots__ = ("value", "grad", "name", "_parents", "_backward", "_done")

    def __init__(self, value, _parents=(), _backward=None, name=None):
        self.value = _as_array(value)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_var(other))

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, as_var(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _accum(node: Var, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting added or stretched."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    stretched = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if stretched:
        g = g.sum(axis=stretched, keepdims=True)
    return g


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen = {id(root)}
    stack: list[tuple[Var, iter]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif id(nxt) not in seen:
            seen.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    return order


def backward(loss: Var) -> None:
    """Run the reverse pass from a scalar loss.

    Every Var reachable from ``loss`` receives its gradient in ``.grad``
    (accumulated on top of whatever is already there, so clear parameter
    grads between steps).  A second backward through the same graph root is
    an error; rebuild the graph instead.
    """
    if loss._done:
        raise RuntimeError("backward() already ran for this graph; rebuild the graph before calling again")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    loss._done = True
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(vars_) -> None:
    for v in vars_:
        v.grad = None


def _binary(opname, a: Var, b: Var):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.value.shape} and {b.value.shape} are not broadcast-compatible") from None


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    _binary("add", a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Var(a.value + b.value, (a, b), bwd)


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    _binary("sub", a, b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Var(a.value - b.value, (a, b), bwd)


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    _binary("mul", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        _accum(a, _unbroadcast(g * bv, a.value.shape))
        _accum(b, _unbroadcast(g * av, b.value.shape))

    return Var(av * bv, (a, b), bwd)


def div(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    _binary("div", a, b)
    av, bv = a.value, b.value

    def bwd(g):
        _accum(a, _unbroadcast(g / bv, a.value.shape))
        _accum(b, _unbroadcast(-g * av / (bv * bv), b.value.shape))

    return Var(av / bv, (a, b), bwd)


def neg(a: Var) -> Var:
    a = as_var(a)

    def bwd(g):
        _accum(a, -g)

    return Var(-a.value, (a,), bwd)


def power(a: Var, p) -> Var:
    a = as_var(a)
    p = float(p)
    av = a.value

    def bwd(g):
        _accum(a, g * p * av ** (p - 1.0))

    return Var(av**p, (a,), bwd)


def exp(a: Var) -> Var:
    a = as_var(a)
    y = np.exp(a.value)

    def bwd(g):
        _accum(a, g * y)

    return Var(y, (a,), bwd)


def log(a: Var) -> Var:
    a = as_var(a)
    av = a.value

    def bwd(g):
        _accum(a, g / av)

    return Var(np.log(av), (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid(a: Var) -> Var:
    a = as_var(a)
    y = _sigmoid_np(a.value)

    def bwd(g):
        _accum(a, g * y * (1.0 - y))

    return Var(y, (a,), bwd)


def softplus(a: Var) -> Var:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    a = as_var(a)
    x = a.value
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_np(x)

    def bwd(g):
        _accum(a, g * sig)

    return Var(y, (a,), bwd)


def relu(a: Var) -> Var:
    a = as_var(a)
    mask = a.value > 0

    def bwd(g):
        _accum(a, g * mask)

    return Var(np.maximum(a.value, 0.0), (a,), bwd)


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    in_shape = a.value.shape

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, tuple(ax % len(in_shape) for ax in axes))
        _accum(a, np.broadcast_to(g, in_shape).copy())

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.value.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Var, shape) -> Var:
    a = as_var(a)
    in_shape = a.value.shape

    def bwd(g):
        _accum(a, g.reshape(in_shape))

    return Var(a.value.reshape(shape), (a,), bwd)


def transpose(a: Var, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inverse))

    return Var(np.transpose(a.value, axes), (a,), bwd)


def getitem(a: Var, idx) -> Var:
    """Basic (slice/integer) indexing; gradient scatters into a zero array."""
    a = as_var(a)

    def bwd(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        _accum(a, full)

    return Var(a.value[idx], (a,), bwd)


def concat(parts, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    values = [p.value for p in parts]
    base = list(values[0].shape)
    for v in values[1:]:
        other = list(v.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shapes {values[0].shape} and {v.shape} differ off axis {axis}")
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(sl)])

    return Var(np.concatenate(values, axis=axis), tuple(parts), bwd)


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def bwd(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return Var(av @ bv, (a, b), bwd)


def dense(x: Var, w: Var, b: Var | None = None) -> Var:
    """Affine map ``x @ w + b`` for a (batch, features) input."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def slogdet(a: Var) -> Var:
    """log|det A| of a square matrix; gradient is inv(A)^T."""
    a = as_var(a)
    av = a.value
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"slogdet: expected a square matrix, got shape {av.shape}")
    sign, ld = np.linalg.slogdet(av)
    if sign == 0 or not np.isfinite(ld) or ld < np.log(1e-12):
        raise ValueError(f"slogdet: matrix is singular or near-singular (log|det| = {ld})")
    inv_t = np.linalg.inv(av).T.copy()

    def bwd(g):
        _accum(a, g * inv_t)

    return Var(np.asarray(ld, dtype=av.dtype), (a,), bwd)


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` maps a Var to a scalar Var.  Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    leaf = Var(x.copy())
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(x) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)

    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            pert = flat.copy()
            pert[i] += sign * eps
            val = f(Var(pert.reshape(x.shape))).value
            if slot == 0:
                hi = float(val)
            else:
                lo = float(val)
        numeric[i] = (hi - lo) / (2.0 * eps)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise ValueError("grad_check: non-finite values in analytic or numeric gradient")
    rel = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
