"""A small reverse-mode differentiation tape over numpy arrays.

Only the operators the toy model needs are provided: affine maps, elementwise
arithmetic, reshapes, masked softmax, layer norm, GELU, gathers and a
softmax cross-entropy. ``external_loss`` splices in a scalar whose gradient is
known in closed form, which is how the recovery losses join the graph.
"""
from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.value + b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Tensor(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return Tensor(a.value @ b.value, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor(a.value.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor(np.transpose(a.value, axes), (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = [constant(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    x = a.value
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor(0.5 * x * (1.0 + t), (a,), backward)


def masked_softmax(a: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries with ``allowed == False`` get exactly 0."""
    x = a.value if allowed is None else np.where(allowed, a.value, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return Tensor(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = v.shape[-1]

    def backward(g):
        gx_hat = g * gamma.value
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor(xhat * gamma.value + beta.value, (x, gamma, beta), backward)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return Tensor(table.value[ids], (table,), backward)


def take_rows(x: Tensor, batch_idx: np.ndarray, row_idx: np.ndarray) -> Tensor:
    """Gather ``x[batch_idx[k], row_idx[k]]`` from a (B, T, d) tensor."""

    def backward(g):
        out = np.zeros_like(x.value)
        np.add.at(out, (batch_idx, row_idx), g)
        return (out,)

    return Tensor(x.value[batch_idx, row_idx], (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy needs at least one supervised position")
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    value = -picked[mask].sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        grad = grad * (mask[..., None] / count)
        return (g * grad,)

    return Tensor(value, (logits,), backward)


def external_loss(x: Tensor, value: float, grad: np.ndarray) -> Tensor:
    """Scalar node with a precomputed value and gradient with respect to ``x``."""
    grad = np.asarray(grad, dtype=np.float64)

    def backward(g):
        return (g * grad,)

    return Tensor(value, (x,), backward)
