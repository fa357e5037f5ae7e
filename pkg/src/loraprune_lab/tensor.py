"""Dense 2-D float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one operand requires a gradient. Outside a tape nothing is recorded,
which is how evaluation code runs without building a graph::

    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    tape.backward(loss)
    sgd_step([w], lr=0.1)

Gradients accumulate additively; callers clear them with :func:`zero_grad`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NonFiniteError, UsageError

LAYER_NORM_EPS = 1e-8
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_ACTIVE_TAPES: list["Tape"] = []


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A (rows, cols) array of float64 values with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 1-D or 2-D, got ndim={arr.ndim}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Creation-ordered record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(out, op)
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs_grad)
    if needs_grad and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(Node(op, inputs, result, grad_fn))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise UsageError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp

    for key, g in grads.items():
        t = holders[key]
        _check_finite(g, "backward")
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * p.grad``; gradients are left as they are."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p!r} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        _check_finite(p.data, "sgd_step")


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs identical shapes: {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    return _emit("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    """Elementwise sum; a 1xN row or Mx1 column operand is broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _emit("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit("gelu", out, (a,), grad_fn)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalisation to zero mean and unit variance (no affine terms)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = (x - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layer_norm", xhat, (a,), grad_fn)


def softmax(a) -> Tensor:
    """Row-wise softmax."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def _check_labels(labels, m: int, c: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != m:
        raise DimensionError(f"expected {m} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InputError(f"label out of range [0, {c})")
    return y


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    m, c = logits.shape
    y = _check_labels(labels, m, c)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(m), y].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[np.arange(m), y] -= 1.0
        return (d * (g[0, 0] / m),)

    return _emit("softmax_cross_entropy", np.array([[loss]]), (logits,), grad_fn)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        d = diff * (2.0 * g[0, 0] / n)
        return (d, -d)

    return _emit("mse_loss", np.array([[np.mean(diff**2)]]), (pred, target), grad_fn)


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("reduce_sum", np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size
    return _emit(
        "reduce_mean",
        np.array([[a.data.mean()]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0] / n),),
    )
