"""Adagrad updates.

Embedding rows use a single accumulator scalar per row: the accumulator
grows by the mean of the squared gradient entries, so the state is one
float per row regardless of dimension.  Using the mean rather than the sum
keeps step sizes comparable across dimensions; it differs from a sum only
by a constant factor that folds into the learning rate, but it does change
what a given learning rate means -- documented here on purpose.

Relation (and other dense) parameters use ordinary elementwise Adagrad.

Updates happen in place on shared tables without any locking: concurrent
workers may race on the same rows and individual float reads/writes may
interleave.  That is the intended lock-free training contract; determinism
is only guaranteed with a single worker.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-10


def row_adagrad_update(
    values: np.ndarray,
    acc: np.ndarray,
    row_ids: np.ndarray,
    grads: np.ndarray,
    learning_rate: float,
    eps: float = EPS,
) -> None:
    """Accumulate-then-step on the given rows, in place.

    `row_ids` must be unique (aggregate duplicate rows before calling);
    fancy-index read-modify-write would silently drop repeated ids.
    """
    g2 = np.mean(grads * grads, axis=-1)
    new_acc = acc[row_ids] + g2
    acc[row_ids] = new_acc
    values[row_ids] -= (learning_rate / (np.sqrt(new_acc) + eps))[:, None] * grads


def row_adagrad_step(
    row: np.ndarray, acc: float, grad: np.ndarray, learning_rate: float, eps: float = EPS
) -> tuple[np.ndarray, float]:
    """Single-row functional form: returns (updated row, updated accumulator)."""
    new_acc = acc + float(np.mean(grad * grad))
    return row - learning_rate * grad / (np.sqrt(new_acc) + eps), new_acc


def dense_adagrad_update(
    values: np.ndarray,
    acc: np.ndarray,
    grads: np.ndarray,
    learning_rate: float,
    eps: float = EPS,
) -> None:
    """Elementwise Adagrad on a dense parameter block, in place."""
    acc += grads * grads
    values -= learning_rate * grads / (np.sqrt(acc) + eps)
