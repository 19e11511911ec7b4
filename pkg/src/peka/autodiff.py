"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D float64 array; scalars are 1x1 matrices. A ``Tape``
records tensors in creation order, which is already a topological order
(operands exist before the ops that consume them), so the backward pass
simply walks the record in reverse. Tapes are rebuilt for every forward
pass; nothing is cached between steps.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InfiniteDivergenceError, ShapeError

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce input to a finite, C-contiguous 2-D float64 array.

    Scalars become 1x1, flat sequences become a single row. Non-finite
    entries are rejected.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def gelu_array(x: np.ndarray) -> np.ndarray:
    """Smooth GELU (tanh form), usable outside the tape."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    for axis in (0, 1):
        if shape[axis] == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    return out


class Tensor:
    """One tape node: a value plus a gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "_parents", "_backward")

    def __init__(self, value, tape, requires_grad, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- operator sugar -------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def gelu(self) -> "Tensor":
        return gelu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def transpose(self) -> "Tensor":
        return transpose(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Ordered record of tensors; backward walks it in exact reverse."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def constant(self, values) -> Tensor:
        node = Tensor(as_matrix(values), self, requires_grad=False)
        self.nodes.append(node)
        return node

    def parameter(self, values) -> Tensor:
        """Leaf tensor that collects a gradient. The array is referenced,
        not copied, so the caller's updates are visible on the next tape."""
        arr = values if isinstance(values, np.ndarray) else as_matrix(values)
        if arr.ndim != 2:
            raise ShapeError(f"parameter must be 2-D, got shape {arr.shape}")
        node = Tensor(arr, self, requires_grad=True)
        self.nodes.append(node)
        return node

    def record(self, value: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], None] | None) -> Tensor:
        """Append an op result; ``backward`` receives the node's gradient
        and must accumulate into the parents."""
        for p in parents:
            if p.tape is not self:
                raise ValueError("tensors from different tapes cannot be combined")
        requires = any(p.requires_grad for p in parents)
        node = Tensor(value, self, requires, tuple(parents),
                      backward if requires else None)
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)=1 and propagate through the record in reverse.

        Nodes with no path to the loss keep a None gradient, which
        ``grad`` reports as exact zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got {loss.value.shape}")
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def grad(self, tensor: Tensor) -> np.ndarray:
        if tensor.grad is None:
            return np.zeros_like(tensor.value)
        return tensor.grad


# -- primitive ops ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g @ bv.T)
        if b.requires_grad:
            b.accumulate(av.T @ g)

    return a.tape.record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return a.tape.record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    av, bv = a.value, b.value

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g * bv, a.shape))
        b.accumulate(_unbroadcast(g * av, b.shape))

    return a.tape.record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(c * g)

    return a.tape.record(c * a.value, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate(g.T)

    return a.tape.record(np.ascontiguousarray(a.value.T), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    av = a.value

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * _gelu_grad(av))

    return a.tape.record(gelu_array(av), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * (1.0 - t * t))

    return a.tape.record(t, (a,), backward)


def softmax_t(a: Tensor, tau: float) -> Tensor:
    """Row-wise softmax of a / tau, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = a.value / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=1, keepdims=True)
        a.accumulate(s * (g - dot) / tau)

    return a.tape.record(s, (a,), backward)


def kl_const(p: np.ndarray, q: Tensor) -> Tensor:
    """Mean-over-rows KL(p || q) with p a constant row-stochastic matrix.

    Terms with p == 0 contribute exactly zero; q must be positive
    wherever p has mass.
    """
    if p.shape != q.shape:
        raise ShapeError(f"KL shape mismatch: {p.shape} vs {q.shape}")
    qv = q.value
    mask = p > 0.0
    if np.any(qv[mask] <= 0.0):
        raise InfiniteDivergenceError("q has a zero entry where p > 0")
    n = p.shape[0]
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(qv[mask]))
    out = np.array([[terms.sum() / n]])

    def backward(g: np.ndarray) -> None:
        dq = np.zeros_like(qv)
        dq[mask] = -p[mask] / qv[mask]
        q.accumulate((g[0, 0] / n) * dq)

    return q.tape.record(out, (q,), backward)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row logits against integer labels,
    stabilized via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    x = logits.value
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(n), labels]
    out = np.array([[float(np.mean(lse - picked))]])

    def backward(g: np.ndarray) -> None:
        soft = np.exp(x - lse[:, None])
        soft[np.arange(n), labels] -= 1.0
        logits.accumulate((g[0, 0] / n) * soft)

    return logits.tape.record(out, (logits,), backward)


def sum_squares(a: Tensor) -> Tensor:
    av = a.value
    out = np.array([[float(np.sum(av * av))]])

    def backward(g: np.ndarray) -> None:
        a.accumulate((2.0 * g[0, 0]) * av)

    return a.tape.record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * mask)

    return a.tape.record(a.value * mask, (a,), backward)
