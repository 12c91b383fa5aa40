"""Dense float64 tensors with reverse-mode differentiation.

Each differentiable op records its parents and a closure that pushes the
output gradient back to them. ``backward`` walks the recorded graph once in
reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return _result(s, (x,), bw, "sigmoid")


def silu(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accumulate(x, g * (s + d * s * (1.0 - s)))

    return _result(d * s, (x,), bw, "silu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), bw, "tanh")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as a single node."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match weight {weight.shape}")

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), bw, "affine")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, shape))

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


# ---------------------------------------------------------------- softmax family

def _softmax(d: np.ndarray) -> np.ndarray:
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(d: np.ndarray) -> np.ndarray:
    shifted = d - d.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    y = _log_softmax(x.data)
    p = np.exp(y)

    def bw(g):
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _result(y, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- losses

def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        if pred.requires_grad:
            _accumulate(pred, g * 2.0 * diff / n)
        if target.requires_grad:
            _accumulate(target, -g * 2.0 * diff / n)

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse_loss")


def kl_divergence(target_log_probs, pred_log_probs) -> Tensor:
    """Batch-mean KL(p || q) given log p (target) and log q (prediction) rows.

    Zero-probability target entries contribute nothing.
    """
    p_log, q_log = as_tensor(target_log_probs), as_tensor(pred_log_probs)
    if p_log.shape != q_log.shape:
        raise ShapeError(f"kl_divergence: shapes differ {p_log.shape} and {q_log.shape}")
    p = np.exp(p_log.data)
    terms = np.where(p > 0, p * (p_log.data - q_log.data), 0.0)
    rows = p_log.shape[0] if p_log.data.ndim > 1 else 1

    def bw(g):
        if p_log.requires_grad:
            # d/dlogp of p*(logp - logq) = p*(logp - logq) + p
            _accumulate(p_log, g * (terms + p) / rows)
        if q_log.requires_grad:
            _accumulate(q_log, -g * p / rows)

    return _result(np.asarray(terms.sum() / rows), (p_log, q_log), bw, "kl_divergence")


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and a != b for i, (a, b) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing, e.g. ``slice(x, (slice(None), slice(0, 4)))``."""
    shape = x.shape
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {shape}") from exc

    def bw(g):
        full = np.zeros(shape)
        full[index] += g
        _accumulate(x, full)

    return _result(np.array(out), (x,), bw, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None

    def bw(g):
        _accumulate(x, g.reshape(old))

    return _result(out, (x,), bw, "reshape")


# ---------------------------------------------------------------- backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior grads are scratch space; free them
    for n in interior:
        n.grad = None


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params``; exactly zero where unreachable."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out
