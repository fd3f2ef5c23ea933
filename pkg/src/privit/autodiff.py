"""Small reverse-mode autodiff over float64 numpy arrays.

Only the primitives the switched ViT needs are provided.  Every op records its
inputs and a backward closure; :meth:`Tensor.backward` walks the graph in
reverse creation order, which is a valid reverse topological order because a
node is always created after its parents.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "tensor",
    "constant",
    "make_rng",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "absolute",
    "gelu",
    "softmax",
    "softmax_row",
    "log_softmax",
    "layernorm",
    "cross_entropy",
    "concat",
    "broadcast_to",
    "grad_check",
]

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite input where a finite one is required."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate values only; no parents or backward rules are recorded."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self.name = name

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node."""
        if self.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node.parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda n: n._id, reverse=True)
        for node in order:
            if node is not self:
                node.grad = np.zeros_like(node.value) if node._backward else node.grad
        self.grad = np.ones_like(self.value)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        g = _unbroadcast(g, t.shape)
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_check(a, b)

    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _make(a.value * b.value, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def backward(g):
        _accum(a, g * k)

    return _make(a.value * k, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, 2.0 * a.value * g)

    return _make(a.value * a.value, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient sign(x) (0 at the kink)."""

    def backward(g):
        _accum(a, g * np.sign(a.value))

    return _make(np.abs(a.value), (a,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale-by-constant": scale}


def elementwise(tag: str, a: Tensor, b=None) -> Tensor:
    """Tagged pointwise op with strict shapes (equal, or one side scalar)."""
    if tag == "square":
        return square(a)
    if tag not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {tag!r}")
    if tag == "scale-by-constant":
        return scale(a, b)
    b = constant(b)
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{tag}: shape mismatch {a.shape} vs {b.shape}")
    return _ELEMENTWISE[tag](a, b)


# -- shape ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(Batched) matrix product with numpy broadcasting over leading axes."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.value, -1, -2) @ g
            _accum(b, gb)

    return _make(a.value @ b.value, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.value.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.value.transpose(axes), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(a.value[index], (a,), backward)


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [constant(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(items, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.value for t in items], axis=axis), items, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g)

    return _make(np.broadcast_to(a.value, shape).copy(), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- nonlinearities ----------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, pointwise."""
    v = x.value
    t = np.tanh(_GELU_K * (v + _GELU_A * v**3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_A * v * v)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * dt))

    return _make(0.5 * v * (1.0 + t), (x,), backward)


def _check_finite(v: np.ndarray, what: str) -> None:
    if np.isnan(v).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.value, "softmax")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), backward)


def softmax_row(x: Tensor) -> Tensor:
    """Softmax of a single row vector (alias of :func:`softmax` on the last axis)."""
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.value, "log_softmax")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv, bv = gamma.value, beta.value

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, g * xhat)
        if beta.requires_grad:
            _accum(beta, g)
        if x.requires_grad:
            d = g * gv
            dx = inv * (d - d.mean(axis=-1, keepdims=True) - xhat * (d * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(xhat * gv + bv, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    _check_finite(logits.value, "cross_entropy")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        _accum(logits, d * (g / b))

    return _make(np.asarray(loss), (logits,), backward)


# -- gradient oracle ---------------------------------------------------------


def grad_check(f: Callable, x: Tensor | Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with ``x`` (a tensor or a list of tensors) and must return
    a single-element tensor.  The denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.value = np.ascontiguousarray(t.value)
        t.requires_grad = True
        t.zero_grad()
    out = f(x)
    if out.value.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    with no_grad():
        for t in xs:
            analytic = t.grad.copy()
            flat = t.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = f(x).item()
                flat[i] = orig - step
                lo = f(x).item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
