"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every node in creation order, which is already a
topological order, so :func:`backward` walks the list once in reverse.

    tape = Tape()
    w = tape.param(np.array([1.0, 2.0]), "w")
    loss = ad.sum(w * w)
    grads = backward(tape, loss)      # {"w": array([2., 4.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import NumericDomainError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, value, name: str) -> "Node":
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        node = Node(self, np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        return node

    def const(self, value) -> "Node":
        return Node(self, np.asarray(value, dtype=np.float64))


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "name")

    def __init__(self, tape: Tape, value: np.ndarray, parents=(), backward_fn=None, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Node, g: np.ndarray):
    node.grad = g if node.grad is None else node.grad + g


def _make(parents, value, backward_fn) -> Node:
    tape = parents[0].tape
    return Node(tape, value, tuple(parents), backward_fn)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)

    def bw(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _make((a, b), a.value + b.value, bw)


def neg(a: Node) -> Node:
    def bw(out):
        _accumulate(a, -out.grad)

    return _make((a,), -a.value, bw)


def mul(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)

    def bw(out):
        _accumulate(a, _unbroadcast(out.grad * b.value, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.value, b.shape))

    return _make((a, b), a.value * b.value, bw)


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain constant (never differentiated)."""
    c = float(c)

    def bw(out):
        _accumulate(a, out.grad * c)

    return _make((a,), a.value * c, bw)


def square(a: Node) -> Node:
    def bw(out):
        _accumulate(a, 2.0 * a.value * out.grad)

    return _make((a,), a.value * a.value, bw)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def bw(out):
        _accumulate(a, out.grad * mask)

    return _make((a,), np.where(mask, a.value, 0.0), bw)


def exp(a: Node) -> Node:
    value = np.exp(a.value)

    def bw(out):
        _accumulate(a, out.grad * value)

    return _make((a,), value, bw)


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise NumericDomainError("log of non-positive value")

    def bw(out):
        _accumulate(a, out.grad / a.value)

    return _make((a,), np.log(a.value), bw)


def sqrt(a: Node) -> Node:
    value = np.sqrt(a.value)

    def bw(out):
        _accumulate(a, out.grad * 0.5 / value)

    return _make((a,), value, bw)


def norm_cdf(a: Node) -> Node:
    """Standard normal CDF, elementwise."""

    def bw(out):
        _accumulate(a, out.grad * np.exp(-0.5 * a.value**2) / _SQRT_2PI)

    return _make((a,), ndtr(a.value), bw)


def stop_gradient(a: Node) -> Node:
    return a.tape.const(a.value.copy())


# reductions and linear algebra ----------------------------------------------

def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    value = a.value.sum(axis=axis)

    def bw(out):
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make((a,), np.asarray(value), bw)


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def matmul(a, b) -> Node:
    tape = a.tape if isinstance(a, Node) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(out):
        _accumulate(a, out.grad @ b.value.T)
        _accumulate(b, a.value.T @ out.grad)

    return _make((a, b), a.value @ b.value, bw)


def gather(a: Node, index: np.ndarray) -> Node:
    """``out[i, j] = a[i, index[i, j]]`` for a 2-D ``a``."""
    rows = np.arange(a.shape[0])[:, None]

    def bw(out):
        g = np.zeros_like(a.value)
        np.add.at(g, (np.broadcast_to(rows, index.shape), index), out.grad)
        _accumulate(a, g)

    return _make((a,), a.value[rows, index], bw)


def log_softmax(a: Node) -> Node:
    """Row-wise log-softmax over the last axis."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(value)

    def bw(out):
        g = out.grad
        _accumulate(a, g - probs * g.sum(axis=-1, keepdims=True))

    return _make((a,), value, bw)


def softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        _accumulate(a, value * (g - (g * value).sum(axis=-1, keepdims=True)))

    return _make((a,), value, bw)


def masked_softmax(a: Node, mask: np.ndarray) -> Node:
    """Softmax restricted to ``mask``; masked-out entries are exactly 0."""
    masked = np.where(mask, a.value, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    value = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        _accumulate(a, value * (g - (g * value).sum(axis=-1, keepdims=True)))

    return _make((a,), value, bw)


# driving the tape --------------------------------------------------------------

def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Adjoint of a scalar ``loss`` with respect to every parameter on ``tape``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    stop = tape.nodes.index(loss)
    for node in reversed(tape.nodes[: stop + 1]):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node)
    grads = {}
    for name, p in tape.params.items():
        g = np.zeros_like(p.value) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite adjoint for {name!r}")
        grads[name] = g.reshape(p.shape)
    return grads


@dataclass
class GradCheckReport:
    rel_errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _tensor_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # norm-wise over one parameter tensor; per-entry ratios on ~1e-9 entries only measure roundoff
    a, n = np.linalg.norm(analytic), np.linalg.norm(numeric)
    diff = float(np.linalg.norm(analytic - numeric))
    if a < 1e-8 and n < 1e-8:
        return diff
    return diff / max(a, n)


def finite_diff_check(fn, params: dict[str, np.ndarray], step: float = 1e-5,
                      tol: float = 1e-4) -> GradCheckReport:
    """Compare adjoints of ``fn`` against central differences.

    ``fn(tape, nodes)`` builds a scalar loss from the parameter nodes in
    ``nodes`` (same keys as ``params``).  Only ``params`` are perturbed.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if not tol > 0:
        raise ValueError("tol must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, with_grad=False):
        tape = Tape()
        nodes = {k: tape.param(v, k) for k, v in values.items()}
        loss = fn(tape, nodes)
        val = float(loss.value)
        if not np.isfinite(val):
            raise NumericDomainError("non-finite loss during finite-difference check")
        return (val, backward(tape, loss)) if with_grad else val

    _, grads = evaluate(params, with_grad=True)
    report = GradCheckReport(tol=tol)
    for name, base in params.items():
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = dict(params)
            minus = dict(params)
            plus[name] = base.copy()
            minus[name] = base.copy()
            plus[name][idx] += step
            minus[name][idx] -= step
            numeric[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        report.rel_errors[name] = _tensor_error(grads[name], numeric)
    return report
