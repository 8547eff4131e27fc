"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a
closure that pushes the output gradient back into them. ``backward`` walks
the recorded graph in reverse topological order, so a tensor consumed twice
receives the sum of both contributions.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A float64 array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, rule) -> Tensor:
    """Create an output node; ``rule(g)`` must return one gradient per parent (or None)."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = rule
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _matrix(a: Tensor, op: str) -> None:
    if a.data.ndim != 2:
        raise ShapeError(f"{op}: expected a matrix, got shape {a.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), "scale", lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), "shift", lambda g: (g,))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _node(ad / bd, (a, b), "div", lambda g: (g / bd, -g * ad / (bd * bd)))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _node(y, (a,), "sqrt", lambda g: (g * 0.5 / y,))


def abs_(a: Tensor) -> Tensor:
    # np.sign(0) == 0, so exact ties get a zero subgradient
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), "abs", lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), "exp", lambda g: (g * y,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, (a,), "gelu", lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _matrix(a, "matmul")
    _matrix(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def token_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with each contraction summed in sorted order.

    Used where the contracted axis runs over tokens, so that reordering the
    tokens reorders the result without changing a single bit.
    """
    _matrix(a, "token_matmul")
    _matrix(b, "token_matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"token_matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.sort(ad[:, :, None] * bd[None, :, :], axis=1).sum(axis=1)
    return _node(out, (a, b), "token_matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    _matrix(a, "transpose")
    return _node(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-c row (shape (c,) or (1, c)) to every row of an n x c matrix."""
    _matrix(a, "add_row")
    c = a.shape[1]
    if row.size != c or row.data.ndim > 2 or (row.data.ndim == 2 and row.shape[0] != 1):
        raise ShapeError(f"add_row: cannot broadcast {row.shape} over {a.shape}")
    rshape = row.shape
    return _node(a.data + row.data.reshape(1, c), (a, row), "add_row",
                 lambda g: (g, g.sum(axis=0).reshape(rshape)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add_row(out, bias)


# ---------------------------------------------------------------- reductions and reshaping

def _ordered_sum(x: np.ndarray, axis: int | None, keepdims: bool = False) -> np.ndarray:
    # summing in sorted order makes the result independent of the input order
    if axis is None:
        return np.sort(x, axis=None).sum(keepdims=keepdims) if keepdims else np.sort(x, axis=None).sum()
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum whose value does not depend on the order of the summed entries."""
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    data = _ordered_sum(a.data, axis, keepdims)
    if axis is None and keepdims:
        data = data.reshape((1,) * a.data.ndim)
    return _node(data, (a,), "sum", rule)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.data.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} are incompatible")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat",
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Gather size-1 tensors into a vector."""
    scalars = list(scalars)
    shapes = [s.shape for s in scalars]
    for s in scalars:
        if s.size != 1:
            raise ShapeError(f"stack: expected size-1 tensors, got {s.shape}")
    data = np.array([s.data.reshape(-1)[0] for s in scalars], dtype=np.float64)
    return _node(data, scalars, "stack",
                 lambda g: tuple(np.array(g[i]).reshape(shapes[i]) for i in range(len(shapes))))


def expand(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast a size-1 tensor to ``shape``."""
    if a.size != 1:
        raise ShapeError(f"expand: expected a size-1 tensor, got {a.shape}")
    old = a.shape
    return _node(np.full(shape, a.data.reshape(-1)[0]), (a,), "expand",
                 lambda g: (np.asarray(_ordered_sum(g, None)).reshape(old),))


def take(a: Tensor, index: Sequence[int], axis: int = 0) -> Tensor:
    """Select slices by an index list along ``axis``; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(out, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (out,)

    return _node(np.take(a.data, idx, axis=axis), (a,), "take", rule)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice ``a[:, start:stop]``."""
    _matrix(a, "columns")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _node(a.data[:, start:stop].copy(), (a,), "columns", rule)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- normalisation

def softmax_rows(m: Tensor) -> Tensor:
    _matrix(m, "softmax_rows")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / _ordered_sum(e, 1, keepdims=True)
    return _node(y, (m,), "softmax_rows",
                 lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation followed by an affine map (gain, bias of shape (c,))."""
    _matrix(x, "layer_norm")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match width {c}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gd + bias.data, (x, gain, bias), "layer_norm", rule)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Interior nodes only carry gradients for the duration of the call. Leaf
    gradients are added to whatever is already stored, so several backward
    passes before an optimiser step sum their contributions.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient checking

def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between ``backward`` and central differences.

    ``f`` maps the input tensors to a scalar tensor. Every entry of every
    input is perturbed; the relative error uses ``max(|a|, |n|, 1e-8)`` as
    denominator.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64)  # private copy: perturbation must not alias
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
