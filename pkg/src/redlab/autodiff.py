"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in append
order; ``Tape.backward`` walks that list once in reverse.  Outside a tape every
op returns a constant, which is how evaluation code runs without bookkeeping.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (grad_reverse(x, 1.0) * grad_reverse(x, 1.0)).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([-6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS_PROB = 1e-12


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.visits = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], backward) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(out, tuple(parents), backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor that requires it."""
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        pending = {loss.node_id: np.asarray(seed, dtype=np.float64)}
        self.visits = 0
        for idx in range(loss.node_id, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            self.visits += 1
            node.out._accumulate(g)
            for parent, gp in zip(node.parents, node.backward(g)):
                if gp is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    if parent.node_id in pending:
                        pending[parent.node_id] = pending[parent.node_id] + gp
                    else:
                        pending[parent.node_id] = gp
                else:
                    parent._accumulate(gp)


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.data = values
    out.grad = None
    out.node_id = None
    out._tape = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is allowed
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(x, c) -> Tensor:
    """Multiply by a scalar (python number or one-element tensor)."""
    c = as_tensor(c)
    if c.size != 1:
        raise DimensionError(f"scale factor must be scalar, got shape {c.shape}")
    return mul(c, x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[B, n] + b[n]."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value; clamp probabilities first")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax_rows")


def outer(p: Tensor, q: Tensor) -> Tensor:
    p, q = as_tensor(p), as_tensor(q)
    if p.data.ndim != 1 or p.shape != q.shape:
        raise DimensionError(f"outer: need equal-length vectors, got {p.shape} and {q.shape}")
    return _make(np.outer(p.data, q.data), (p, q),
                 lambda g: (g @ q.data, g.T @ p.data), "outer")


def batch_outer(a: Tensor, b: Tensor) -> Tensor:
    """Per-row flattened outer product: out[r] = vec(a[r] ⊗ b[r]), shape [B, n*m]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch_outer: row mismatch {a.shape} vs {b.shape}")
    n_rows, n, m = a.shape[0], a.shape[1], b.shape[1]
    y = (a.data[:, :, None] * b.data[:, None, :]).reshape(n_rows, n * m)

    def backward(g):
        g3 = g.reshape(n_rows, n, m)
        return (g3 @ b.data[:, :, None])[:, :, 0], (a.data[:, None, :] @ g3)[:, 0, :]

    return _make(y, (a, b), backward, "batch_outer")


def transpose(m: Tensor) -> Tensor:
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {m.shape}")
    return _make(m.data.T.copy(), (m,), lambda g: (g.T,), "transpose")


def trace(m: Tensor) -> Tensor:
    m = as_tensor(m)
    if m.data.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"trace needs a square matrix, got shape {m.shape}")
    eye = np.eye(m.shape[0])
    return _make(np.asarray(np.trace(m.data)), (m,), lambda g: (g * eye,), "trace")


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of matching rows, shape [B]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"rows_dot: shapes {a.shape} and {b.shape}")
    return _make((a.data * b.data).sum(axis=1), (a, b),
                 lambda g: (g[:, None] * b.data, g[:, None] * a.data), "rows_dot")


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    y = x.data.sum(axis=axis)
    return _make(y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return scale(tsum(x, axis), 1.0 / n)


def take_rows(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "take_rows")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {a.shape} vs {b.shape}")
    k = a.shape[0]
    return _make(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:k], g[k:]), "concat_rows")


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.reshape(-1), (x,), lambda g: (g.reshape(shape),), "flatten")


def grad_reverse(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -coeff."""
    if coeff < 0:
        raise ValueError("gradient reversal coefficient must be non-negative")
    x = as_tensor(x)
    return _make(x.data.copy(), (x,), lambda g: (-coeff * g,), "grad_reverse")


def stop_gradient(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.copy())


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"label out of range for {num_classes} classes")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -sum_i q_i log p_i, with p clamped to [EPS_PROB, 1]."""
    probs = as_tensor(probs)
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] probabilities, got {probs.shape}")
    n_rows, n_classes = probs.shape
    labels = np.asarray(labels)
    target = labels.astype(np.float64) if labels.ndim == 2 else one_hot(labels, n_classes)
    if target.shape != probs.shape:
        raise DimensionError(f"cross_entropy: labels {target.shape} vs probs {probs.shape}")
    if n_rows == 0:
        raise ValueError("cross_entropy of an empty batch")
    logp = log(clamp(probs, EPS_PROB, 1.0))
    return scale(tsum(mul(logp, Tensor(target))), -1.0 / n_rows)
