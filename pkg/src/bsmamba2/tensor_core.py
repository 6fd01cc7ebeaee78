"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable array in the package is a :class:`Tensor`. Operations
record a node holding references to their inputs and a closure that maps the
output gradient to input gradients. :meth:`Tensor.backward` walks the nodes
reachable from a scalar loss in reverse creation order, which is a valid
topological order because a node can only consume tensors created before it.

Broadcasting is deliberately narrow. Two operands combine only when

* their shapes are identical,
* one of them is a scalar (shape ``()`` or ``(1,)``),
* the smaller shape is a suffix of the larger one (``(T, D) + (D,)``), or
* the shapes agree except that one has a trailing axis of size 1
  (``(T, D) * (T, 1)``, the pattern produced by ``keepdims`` reductions).

Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.id = next(_ids)
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)

        order = _reachable(self)
        grads: dict[int, np.ndarray] = {self.id: grad}
        for t in order:
            g = grads.pop(t.id, None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = t.node.backward(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(
                        f"{t.node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg

    # --------------------------------------------------------------- operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

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
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        if t.node is not None:
            stack.extend(p for p in t.node.parents if p.id not in seen)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive, attaching a graph node if needed.

    ``backward(g)`` must return one gradient (or None) per parent, each with the
    parent's shape.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out.node = Node(op, parents, backward)
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


# ------------------------------------------------------------------ broadcasting
def _is_scalar_shape(shape: tuple) -> bool:
    return shape == () or shape == (1,)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or _is_scalar_shape(a) or _is_scalar_shape(b):
        return
    small, large = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) <= len(large) and large[len(large) - len(small):] == small:
        return
    if len(a) == len(b) and a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1):
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar_shape(shape):
        return np.asarray(g.sum()).reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, op: str):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, op)
    return a, b


# -------------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(x, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant real exponent."""
    x = as_tensor(x)
    p = float(exponent)
    out = x.data ** p
    return record(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "pow")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


UNARY_KINDS = ("exp", "tanh", "sigmoid", "softplus", "neg", "abs")


def unary(kind: str, x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if kind == "exp":
        out = np.exp(d)
        back = lambda g: (g * out,)
    elif kind == "tanh":
        out = np.tanh(d)
        back = lambda g: (g * (1.0 - out * out),)
    elif kind == "sigmoid":
        out = _sigmoid(d)
        back = lambda g: (g * out * (1.0 - out),)
    elif kind == "softplus":
        out = _softplus(d)
        back = lambda g: (g * _sigmoid(d),)
    elif kind == "neg":
        out = -d
        back = lambda g: (-g,)
    elif kind == "abs":
        out = np.abs(d)
        # np.sign(0) == 0: subgradient 0 at the kink
        back = lambda g: (g * np.sign(d),)
    else:
        raise ValueError(f"unknown unary kind {kind!r}; expected one of {UNARY_KINDS}")
    return record(out, (x,), back, kind)


def exp(x):
    return unary("exp", x)


def tanh(x):
    return unary("tanh", x)


def sigmoid(x):
    return unary("sigmoid", x)


def softplus(x):
    return unary("softplus", x)


def neg(x):
    return unary("neg", x)


def absolute(x):
    return unary("abs", x)


# ------------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for tensor of rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean, or L1 norm (sum of absolute values) over ``axis``."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        src = x.data
        scale = None
    elif kind == "mean":
        src = x.data
        scale = 1.0 / count
    elif kind == "l1":
        src = np.abs(x.data)
        scale = None
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    out = src.sum(axis=axes, keepdims=keepdims)
    if scale is not None:
        out = out * scale

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, x.shape)
        if kind == "mean":
            return (g * scale,)
        if kind == "l1":
            return (g * np.sign(x.data),)
        return (np.array(g),)

    return record(out, (x,), back, kind)


def tsum(x, axis=None, keepdims=False):
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False):
    return reduce("mean", x, axis, keepdims)


def l1(x, axis=None, keepdims=False):
    return reduce("l1", x, axis, keepdims)


# --------------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    """Matrix product of ``a`` (M×K, or any leading batch dims ×K) with ``b`` (K×N)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return record(out, (a, b), back, "matmul")


# ---------------------------------------------------------------- shape ops
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return record(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back into a zero array."""
    x = as_tensor(x)
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return record(np.array(out), (x,), back, "getitem")


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    out = np.flip(x.data, axis=axis).copy()
    return record(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record(out, tensors,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ------------------------------------------------------------- grad checking
@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def __str__(self) -> str:
        lines = [f"{name}: max rel err {err:.3e} {'ok' if err <= self.tol else 'FAIL'}"
                 for name, err in self.errors.items()]
        return "\n".join(lines)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor],
               h: float = 1e-6, tol: float = 1e-6, floor: float | None = None,
               indices: dict[str, Iterable[tuple]] | None = None) -> GradCheckReport:
    """Compare backward() against central differences for every entry of ``params``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. The default floor is the
    finite-difference rounding noise (``eps * |loss| / h``) scaled by ``10 / tol``,
    so entries whose true gradient sits below what central differences can
    resolve are compared absolutely against ten times that noise. ``indices``
    restricts which entries are perturbed for a given parameter name.
    """
    if not h > 0:
        raise ContractError(f"grad_check step h must be positive, got {h}")
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}

    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"grad_check: parameter {name} holds non-finite values")
        p.zero_grad()
    loss = f()
    base = loss.item()
    if not math.isfinite(base):
        raise FloatingPointError(f"grad_check: loss is not finite ({base})")
    loss.backward()
    if floor is None:
        noise = np.finfo(DTYPE).eps * max(1.0, abs(base)) / h
        floor = 10.0 * noise / tol

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            if not np.all(np.isfinite(analytic)):
                raise FloatingPointError(f"grad_check: non-finite analytic gradient in {name}")
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            if indices is not None and name in indices:
                idx_list = [np.ravel_multi_index(ix, p.shape) if isinstance(ix, tuple) else ix
                            for ix in indices[name]]
            else:
                idx_list = range(flat.size)
            checked = np.zeros(flat.size, dtype=bool)
            for i in idx_list:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(
                        f"grad_check: non-finite loss perturbing {name}[{i}]")
                numeric[i] = (up - down) / (2.0 * h)
                checked[i] = True
            a = analytic.reshape(-1)[checked]
            n = numeric[checked]
            err = _rel_err(a, n, floor) if a.size else np.zeros(1)
            report.errors[name] = float(err.max())
            if a.size:
                worst = np.flatnonzero(checked)[int(err.argmax())]
                report.worst_index[name] = np.unravel_index(worst, p.shape)
    return report
