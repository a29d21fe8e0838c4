"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations issued while a
:class:`Tape` is active and at least one operand requires a gradient are
recorded on that tape together with a backward rule; ``backward(root)``
replays those rules in reverse recording order.

    >>> with Tape():
    ...     x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor", "Tape", "backward", "tensor", "as_tensor", "record",
    "matmul", "elementwise", "exp", "log", "tanh", "sqrt", "softplus", "gelu",
    "softmax", "sum", "mean", "reshape", "transpose",
    "set_default_dtype", "get_default_dtype", "precision", "set_debug",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64
_debug = False
_tape_stack: list[Tape] = []


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = _DTYPES.get(dtype, dtype)
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DomainError(f"unsupported dtype {dtype!r}")
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype ("f32" or "f64")."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """Enable the non-finite check on every recorded result."""
    global _debug
    _debug = bool(flag)


class _Node:
    __slots__ = ("parents", "out", "rule")

    def __init__(self, parents, out, rule):
        self.parents = parents
        self.out = out
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def backward(self, root: Tensor) -> None:
        if root.data.ndim != 0:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root._node is None or root._node not in self.nodes:
            raise ContractError("root was not produced under this tape")
        pending = {id(root): np.ones_like(root.data)}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and p._node is None and p.grad is None:
                    p.grad = np.zeros_like(p.data)
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.rule(g)
            for p, gp in zip(node.parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if gp.shape != p.data.shape:
                    gp = _unbroadcast(gp, p.data.shape)
                if p._node is None:
                    p.grad = p.grad + gp
                elif id(p) in pending:
                    pending[id(p)] = pending[id(p)] + gp
                else:
                    pending[id(p)] = gp


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    node = root._node
    if root.data.ndim != 0:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if node is None:
        raise ContractError("root was not produced under an active tape")
    for tape in reversed(_tape_stack):
        if node in tape.nodes:
            tape.backward(root)
            return
    raise ContractError("the tape that produced root is no longer active")


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = _default_dtype
        self.data = _contiguous(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: elementwise("add", self, o)
    __radd__ = lambda self, o: elementwise("add", o, self)
    __sub__ = lambda self, o: elementwise("sub", self, o)
    __rsub__ = lambda self, o: elementwise("sub", o, self)
    __mul__ = lambda self, o: elementwise("mul", self, o)
    __rmul__ = lambda self, o: elementwise("mul", o, self)
    __truediv__ = lambda self, o: elementwise("div", self, o)
    __rtruediv__ = lambda self, o: elementwise("div", o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    def __neg__(self):
        return record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return record(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __getitem__(self, idx):
        shape = self.data.shape

        def rule(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return record(self.data[idx], (self,), rule)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

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


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=_default_dtype))
    return Tensor(x, dtype=dtype)


def record(data, parents, rule) -> Tensor:
    """Wrap ``data`` as a Tensor and record ``rule`` if any parent needs grads.

    ``rule(grad_out)`` returns one gradient array (or None) per parent.
    Gradients may be returned in broadcast shape; they are reduced here.
    """
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a recorded operation")
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(np.asarray(data))
    out.grad = None
    out._node = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), out, rule)
        tape.nodes.append(out._node)
    return out


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(ad @ bd, (a, b), rule)


def _softplus(v):
    return np.logaddexp(v.dtype.type(0), v)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


_INV_SQRT2 = 1 / math.sqrt(2.0)
_INV_SQRT2PI = 1 / math.sqrt(2.0 * math.pi)


def elementwise(kind: str, a, b=None) -> Tensor:
    """Pointwise operation by name.

    Binary kinds: add, sub, mul, div (trailing-dimension broadcasting).
    Unary kinds: exp, log, tanh, sqrt, softplus, gelu.
    """
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise DomainError(f"{kind} needs two operands")
        # python scalars and raw arrays adopt the tensor operand's dtype
        if isinstance(a, Tensor):
            b = as_tensor(b, dtype=None if isinstance(b, Tensor) else a.dtype)
        else:
            b = as_tensor(b)
            a = as_tensor(a, dtype=b.dtype)
        _check_broadcast(a, b)
        x, y = a.data, b.data
        if kind == "add":
            return record(x + y, (a, b), lambda g: (g, g))
        if kind == "sub":
            return record(x - y, (a, b), lambda g: (g, -g))
        if kind == "mul":
            return record(x * y, (a, b), lambda g: (g * y, g * x))
        return record(x / y, (a, b), lambda g: (g / y, -g * x / (y * y)))
    if b is not None:
        raise DomainError(f"{kind} is unary")
    a = as_tensor(a)
    x = a.data
    if kind == "exp":
        out = np.exp(x)
        return record(out, (a,), lambda g: (g * out,))
    if kind == "log":
        return record(np.log(x), (a,), lambda g: (g / x,))
    if kind == "tanh":
        out = np.tanh(x)
        return record(out, (a,), lambda g: (g * (1 - out * out),))
    if kind == "sqrt":
        out = np.sqrt(x)
        return record(out, (a,), lambda g: (g / (2 * out),))
    if kind == "softplus":
        return record(_softplus(x), (a,), lambda g: (g * _sigmoid(x),))
    if kind == "gelu":
        cdf = 0.5 * (1 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI

        return record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))
    raise DomainError(f"unknown elementwise kind {kind!r}")


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def tanh(a):
    return elementwise("tanh", a)


def sqrt(a):
    return elementwise("sqrt", a)


def softplus(a):
    return elementwise("softplus", a)


def gelu(a):
    return elementwise("gelu", a)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record(out, (a,), rule)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), rule)
