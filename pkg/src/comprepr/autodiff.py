"""A small reverse-mode automatic differentiation engine over dense fp64 arrays.

Every operation returns a new :class:`Tensor`. When at least one operand
requires a gradient, the result remembers its parents and a closure that maps
the upstream gradient to per-parent contributions. Tensors receive a
monotonically increasing creation index, so sorting reachable nodes by that
index gives a valid topological order of the recorded computation.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, NumericError

EPS_NORM = 1e-12

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents: tuple = ()
        self.backward_fn = None
        self.index = next(_counter)
        self.name = name

    @classmethod
    def _result(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.index = next(_counter)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out.backward_fn = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("%s: incompatible shapes %s and %s" % (opname, a.shape, b.shape)) from None


# ---------------------------------------------------------------------------
# tape


class ComputationTape:
    """Nodes reachable from a root, in ascending creation order."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)
        self.position = {id(n): i for i, n in enumerate(self.nodes)}

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node.parents)
        return cls(sorted(seen.values(), key=lambda n: n.index))

    def __len__(self):
        return len(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.ndim != 0:
        raise ContractError("backward requires a scalar root, got shape %s" % (root.shape,))
    if not root.requires_grad:
        return
    tape = ComputationTape.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % a.ndim
    return Tensor._result(
        a.data.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),)
    )


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix, got shape %s" % (a.shape,))
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul: shapes %s and %s do not chain" % (a.shape, b.shape))
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return Tensor._result(np.asarray(ad @ bd), (a, b), bw)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for a vector or a row-batch ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(
            "affine: input %s, weight %s, bias %s are incompatible" % (x.shape, weight.shape, bias.shape)
        )
    xd, wd = x.data, weight.data

    def bw(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor._result(xd @ wd.T + bias.data, (x, weight, bias), bw)


def l2_normalize(v, axis: int = -1) -> Tensor:
    """Divide ``v`` by its Euclidean norm along ``axis``.

    Raises DegenerateVectorError when any norm is below ``EPS_NORM``.
    """
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if norm.size and norm.min() < EPS_NORM:
        raise DegenerateVectorError("cannot normalize a vector with norm %.3g" % norm.min())
    y = v.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._result(y, (v,), bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("cosine_similarity: shapes %s and %s differ" % (a.shape, b.shape))
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows.

    ``logits`` is either a vector with an integer label or a matrix with one
    label per row.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z2.ndim != 2 or y.shape[0] != z2.shape[0]:
        raise DimensionError("softmax_cross_entropy: logits %s vs labels %s" % (z.shape, y.shape))
    n, c = z2.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError("label out of range for %d classes" % c)
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, y]))

    def bw(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, y] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return Tensor._result(np.asarray(loss), (logits,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(logits, targets, weights=None) -> Tensor:
    """Weighted mean binary cross-entropy ``sum(w * l) / sum(w)`` on raw scores."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    if t.shape != z.shape or w.shape != z.shape:
        raise DimensionError("bce_with_logits: logits %s, targets %s, weights %s" % (z.shape, t.shape, w.shape))
    total = w.sum()
    if total <= 0:
        raise ContractError("bce_with_logits: no supervised entries")
    per = np.logaddexp(0.0, z) - t * z
    loss = float((w * per).sum() / total)
    return Tensor._result(np.asarray(loss), (logits,), lambda g: (g * w * (_sigmoid(z) - t) / total,))


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckResult:
    max_error: float
    param: int
    coord: tuple

    def __float__(self):
        return self.max_error


def _scalar_value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = float(as_tensor(f()).data)
    if not math.isfinite(value):
        raise NumericError("objective evaluated to %r" % value)
    return value


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients of ``f`` with central differences.

    Returns the worst relative error ``|a - n| / max(1e-8, |a| + |n|)`` and
    where it occurred (parameter position, coordinate).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError("eps must lie in [1e-7, 1e-3], got %g" % eps)
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("grad_check parameters must require gradients")
        p.zero_grad()
    out = as_tensor(f())
    if not math.isfinite(float(out.data)):
        raise NumericError("objective evaluated to %r" % float(out.data))
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = GradCheckResult(0.0, -1, ())
    for pi, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar_value(f)
            flat[i] = orig - eps
            fm = _scalar_value(f)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            if err > worst.max_error or worst.param < 0:
                worst = GradCheckResult(err, pi, np.unravel_index(i, p.shape) if p.ndim else ())
    return worst


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    return check_gradients(f, params, eps).max_error
