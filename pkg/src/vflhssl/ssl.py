"""The three self-supervised losses and the MoCo negative queue.

All losses take a prediction ``p`` and a target ``z_target``; the
target is always routed through stop_gradient internally, so gradients
never reach the target's producers regardless of caller discipline.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass
class SslVariant:
    kind: str  # simsiam | byol | moco
    temperature: float = 0.5
    queue_capacity: int = 256

    def __post_init__(self):
        if self.kind not in ("simsiam", "byol", "moco"):
            raise ConfigError(f"unknown SSL variant {self.kind!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.queue_capacity < 0:
            raise ConfigError("queue_capacity must be non-negative")


class NegativeQueue:
    """FIFO of unit-normalized representation rows, bounded by capacity."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ConfigError("queue capacity must be non-negative")
        self.capacity = capacity
        self.entries = deque(maxlen=capacity if capacity else None)

    def __len__(self):
        return len(self.entries)

    def enqueue(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        norms = np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), T.NORM_EPS)
        for row in rows / norms:
            if self.capacity == 0:
                return
            self.entries.append(row)

    def as_matrix(self):
        if not self.entries:
            return None
        return np.stack(self.entries, axis=0)


def _check_pair(p, z):
    if p.shape != z.shape:
        raise ShapeError(f"prediction {p.shape} vs target {z.shape}")


def loss_simsiam(p: T.Tensor, z_target: T.Tensor) -> T.Tensor:
    """Mean over the batch of the negative cosine similarity."""
    _check_pair(p, z_target)
    pn = T.row_l2_normalize(p)
    zn = T.row_l2_normalize(T.stop_gradient(z_target))
    cos = T.row_sum(T.mul(pn, zn))
    return T.affine(T.mean_all(cos), -1.0)


def loss_byol(p: T.Tensor, z_target: T.Tensor) -> T.Tensor:
    """Mean squared distance of unit vectors: 2 - 2*cos, i.e. 2 + 2*simsiam."""
    return T.affine(loss_simsiam(p, z_target), 2.0, 2.0)


def loss_moco(z1: T.Tensor, z2_target: T.Tensor, queue: NegativeQueue, temperature) -> T.Tensor:
    """InfoNCE with the queue as negatives; rows are unit-normalized and
    all logits are divided by the temperature."""
    _check_pair(z1, z2_target)
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    z1n = T.row_l2_normalize(z1)
    z2n = T.row_l2_normalize(T.stop_gradient(z2_target))
    pos = T.row_sum(T.mul(z1n, z2n))
    negatives = queue.as_matrix()
    if negatives is None:
        logits = pos
    else:
        negs = T.matmul(z1n, T.Tensor(negatives.T))
        logits = T.concat_cols([pos, negs])
    logits = T.affine(logits, 1.0 / temperature)
    labels = np.zeros(z1.rows, dtype=np.int64)  # positive is column 0
    return T.softmax_cross_entropy(logits, labels)


def ssl_loss(variant: SslVariant, p: T.Tensor, z_target: T.Tensor, queue=None) -> T.Tensor:
    if variant.kind == "simsiam":
        return loss_simsiam(p, z_target)
    if variant.kind == "byol":
        return loss_byol(p, z_target)
    if queue is None:
        raise ConfigError("moco requires a negative queue")
    return loss_moco(p, z_target, queue, variant.temperature)
