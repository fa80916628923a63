"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op creates a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients.  Nodes carry a global
sequence number, so creation order is a topological order and ``backward``
simply walks the reachable nodes by decreasing sequence number.

Broadcasting is deliberately narrow: equal shapes, scalar-with-tensor, and a
1-D row vector against the last axis of a matrix.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True
_debug = False


class ShapeError(ValueError):
    def __init__(self, op: str, shape_a, shape_b=None, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a) if shape_a is not None else None
        self.shape_b = tuple(shape_b) if shape_b is not None else None
        msg = f"{op}: incompatible shapes {self.shape_a}"
        if shape_b is not None:
            msg += f" and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Turn the per-op NaN/Inf guard on or off."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference, synthetic-sample generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def max(self, axis=-1):
        return max_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericError(f"{op} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _is_scalar(shape) -> bool:
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def _check_broadcast(op: str, sa, sb) -> None:
    if sa == sb or _is_scalar(sa) or _is_scalar(sb):
        return
    if len(sb) == 1 and len(sa) >= 2 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 2 and sb[-1] == sa[0]:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(-1, shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (no gradient w.r.t. ``c``)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive argument (min {a.data.min():.6g})")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and keeps sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), fn, "matmul")


def rowdot(a, b) -> Tensor:
    """Dot product of matching rows: ``[N, d] x [N, d] -> [N]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("rowdot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(np.einsum("ij,ij->i", ad, bd), (a, b),
                 lambda g: (g[:, None] * bd, g[:, None] * ad), "rowdot")


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("l2_normalize", a.shape, detail="expected 2-D")
    norm = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True) + eps)
    out = a.data / norm

    def fn(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norm,)

    return _make(out, (a,), fn, "l2_normalize")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected 2-D")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", (), detail="no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[k] != ts[0].shape[k] for k in range(nd) if k != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, fn, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", ts[0].shape, t.shape)
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def fn(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(ts)))

    return _make(out, ts, fn, "stack")


def _is_basic_key(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in keys)


def index(a, key) -> Tensor:
    """Slicing / integer-array row selection with scatter-add backward."""
    a = as_tensor(a)
    if isinstance(key, list):
        key = np.asarray(key, dtype=np.intp)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError("index", a.shape, detail=str(exc)) from None
    shape = a.shape
    basic = _is_basic_key(key)

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), fn, "index")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, nd):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % nd,)
    return tuple(sorted(ax % nd for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = a.size if axes is None else int(np.prod([a.shape[k] for k in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def max_(a, axis: int = -1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximising entry."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, (a,), fn, "max")


def min_(a, axis: int = -1) -> Tensor:
    return scale(max_(scale(a, -1.0), axis), -1.0)


def logsumexp(a, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted log-sum-exp; ``mask`` (bool, same shape) restricts the terms.

    A row whose mask is empty evaluates to ``-inf``; callers are expected to
    drop such rows before they reach a loss.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    x = a.data
    if mask is None:
        m = np.max(x, axis=ax, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("logsumexp", x.shape, mask.shape, "mask")
        m = np.max(np.where(mask, x, -np.inf), axis=ax, keepdims=True)
        safe_m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x, safe_m) - safe_m), 0.0)
    s = np.sum(e, axis=ax, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (m + np.log(s)).squeeze(ax)
    soft = e / np.where(s > 0, s, 1.0)

    def fn(g):
        return (np.expand_dims(g, ax) * soft,)

    return _make(out, (a,), fn, "logsumexp")


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    todo = [loss]
    while todo:
        t = todo.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        todo.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_checked: int
    worst: tuple | None = None

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable, x, step: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``x`` is an array or a list of arrays; ``f`` receives Tensors in the same
    structure.  The relative error of each component is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    single = not isinstance(x, (list, tuple))
    xs = [np.array(x, dtype=np.float64)] if single else [np.array(v, dtype=np.float64) for v in x]

    def call(arrays, grad=False):
        ts = [Tensor(v, requires_grad=grad) for v in arrays]
        return ts, f(ts[0] if single else ts)

    ts, out = call(xs, grad=True)
    backward(out)
    worst_err, worst, n = 0.0, None, 0
    for k, v in enumerate(xs):
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(v)
        for i in np.ndindex(v.shape):
            orig = v[i]
            v[i] = orig + step
            fp = call(xs)[1].item()
            v[i] = orig - step
            fm = call(xs)[1].item()
            v[i] = orig
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n += 1
            if worst is None or err > worst_err:
                worst_err, worst = err, (k, i)
    return GradCheckReport(worst_err, bool(worst_err < tol), tol, n, worst)


__all__ = [
    "Tensor", "ShapeError", "DomainError", "NumericError", "GradCheckReport",
    "add", "sub", "mul", "scale", "exp", "log", "tanh", "sigmoid", "matmul", "rowdot",
    "l2_normalize", "transpose", "reshape", "concat", "stack", "index", "sum_", "mean",
    "max_", "min_", "logsumexp", "backward", "grad_check", "no_grad", "set_debug", "as_tensor",
]
