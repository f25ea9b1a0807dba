"""Reverse-mode autodiff over dense 2-D float64 arrays.

Small tape-free engine: every operation records its parents and a
backward closure on the output node; ``Tensor.backward`` topologically
sorts the reachable subgraph and runs the closures in reverse order.
Sufficient for MLPs, embedding lookups, the contrastive losses and
cross-entropy used elsewhere in the package. Everything is float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

NORM_EPS = 1e-12


class Tensor:
    """A 2-D float64 array node in a dynamically built autodiff graph."""

    __slots__ = ("values", "grad", "requires_grad", "stop_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={v.ndim}")
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self.stop_grad = False
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this node.

        ``grad`` seeds the output gradient; defaults to ones (for a 1x1
        loss node that is the usual dL/dL = 1).
        """
        if grad is None:
            grad = np.ones_like(self.values)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.values.shape:
                raise ShapeError(f"seed gradient {grad.shape} != tensor {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(values, parents, backward):
    out = Tensor(values)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- operations ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out_values = a.values @ b.values

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _result(out_values, (a, b), backward)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] > 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; (1,m), (n,1) and (1,1) operands broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_values = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _result(out_values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_values = a.values * b.values
    except ValueError as exc:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.values, b.shape))

    return _result(out_values, (a, b), backward)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """y = scale*x + shift with python-float coefficients."""
    x = as_tensor(x)
    out_values = scale * x.values + shift

    def backward(g):
        if x.requires_grad:
            x._accumulate(scale * g)

    return _result(out_values, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0.0
    out_values = np.where(mask, x.values, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(out_values, (x,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum shapes differ: {a.shape} vs {b.shape}")
    take_a = a.values >= b.values
    out_values = np.where(take_a, a.values, b.values)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _result(out_values, (a, b), backward)


def row_l2_normalize(x: Tensor) -> Tensor:
    """Divide each row by max(||row||_2, eps)."""
    x = as_tensor(x)
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    denom = np.maximum(norms, NORM_EPS)
    live = norms > NORM_EPS  # rows where the clamp is inactive
    out_values = x.values / denom

    def backward(g):
        if x.requires_grad:
            dot = (g * x.values).sum(axis=1, keepdims=True)
            gx = g / denom - np.where(live, x.values * dot / denom**3, 0.0)
            x._accumulate(gx)

    return _result(out_values, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor through which no gradient flows."""
    x = as_tensor(x)
    out = Tensor(x.values.copy())
    out.stop_grad = True
    return out


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_values = np.array([[x.values.sum()]])

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, g[0, 0]))

    return _result(out_values, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.values.size
    out_values = np.array([[x.values.sum() / n]])

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, g[0, 0] / n))

    return _result(out_values, (x,), backward)


def row_sum(x: Tensor) -> Tensor:
    """(n, m) -> (n, 1), summing each row."""
    x = as_tensor(x)
    out_values = x.values.sum(axis=1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _result(out_values, (x,), backward)


def concat_cols(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols of zero tensors")
    n = tensors[0].rows
    for t in tensors:
        if t.rows != n:
            raise ShapeError("concat_cols row counts differ")
    out_values = np.concatenate([t.values for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.cols for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _result(out_values, tuple(tensors), backward)


def embedding_lookup(table: Tensor, indices, frozen_rows=()) -> Tensor:
    """Gather rows of ``table``; rows in ``frozen_rows`` never receive gradient."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise ValidationError(f"embedding index out of range [0, {table.rows})")
    out_values = table.values[idx]
    frozen = frozenset(frozen_rows)

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, idx, g)
            for r in frozen:
                gt[r] = 0.0
            table._accumulate(gt)

    return _result(out_values, (table,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} logit rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValidationError(f"label out of range [0, {c})")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    out_values = np.array([[-log_probs[np.arange(n), y].mean()]])

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(n), y] -= 1.0
            logits._accumulate(probs * (g[0, 0] / n))

    return _result(out_values, (logits,), backward)


# -- optimizer ----------------------------------------------------------

class SgdOptimizer:
    """SGD with momentum and weight decay over a fixed parameter list.

    step(): v <- momentum*v + grad + weight_decay*theta; theta -= lr*v;
    gradients are zeroed afterwards. Parameters without a gradient (or
    with requires_grad off) are untouched.
    """

    def __init__(self, params, learning_rate, momentum=0.9, weight_decay=0.0):
        if learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {id(p): np.zeros_like(p.values) for p in self.params}

    def step(self):
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            v = self._velocity[id(p)]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.values
            p.values -= self.learning_rate * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
