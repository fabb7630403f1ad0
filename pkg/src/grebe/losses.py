"""Training losses over one chunk's positive and candidate scores.

Every loss takes the positive scores `pos` (C,), the candidate score matrix
`neg` (C, n) and a boolean `mask` of the same shape marking induced
positives (True = excluded).  Scores follow the maximize-the-positives
convention, so the hinge is max(margin - pos + neg, 0).  Each function
returns (loss, dpos, dneg); masked entries never contribute to the loss and
their gradient is exactly zero.
"""

from __future__ import annotations

import numpy as np


def _check(pos, neg, mask):
    if neg.shape != mask.shape or neg.shape[0] != pos.shape[0]:
        raise ValueError(f"shape mismatch: pos {pos.shape}, neg {neg.shape}, mask {mask.shape}")


def margin_loss(pos: np.ndarray, neg: np.ndarray, mask: np.ndarray, margin: float):
    """Hinge over every (positive, unmasked candidate) pair.

    Subgradient 0 is used at the hinge point (only strictly violating pairs
    produce gradient).
    """
    _check(pos, neg, mask)
    viol = margin - pos[:, None] + neg
    active = (viol > 0) & ~mask
    loss = float(viol.sum(where=active)) if active.any() else 0.0
    g = active.astype(neg.dtype)
    dneg = g
    dpos = -g.sum(axis=1)
    return loss, dpos, dneg


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)) without overflow
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_loss(pos: np.ndarray, neg: np.ndarray, mask: np.ndarray):
    """Binary cross-entropy: label 1 for positives, 0 for unmasked candidates."""
    _check(pos, neg, mask)
    keep = (~mask).astype(neg.dtype)
    loss = float(_softplus(-pos).sum()) + float((_softplus(neg) * keep).sum())
    dpos = -_sigmoid(-pos)
    dneg = _sigmoid(neg) * keep
    return loss, dpos, dneg


def softmax_loss(pos: np.ndarray, neg: np.ndarray, mask: np.ndarray):
    """Per positive: -log softmax of the positive against its unmasked candidates.

    Computed with max-subtraction; a row with no unmasked candidates
    contributes 0 loss and 0 gradient.
    """
    _check(pos, neg, mask)
    dtype = neg.dtype
    neg_eff = np.where(mask, -np.inf, neg)
    m = np.maximum(pos, neg_eff.max(axis=1, initial=-np.inf))
    ep = np.exp(pos - m)
    with np.errstate(invalid="ignore"):
        en = np.exp(neg_eff - m[:, None])
    en[mask] = 0.0
    z = ep + en.sum(axis=1)
    loss = float(np.sum(np.log(z) - (pos - m)))
    dpos = (ep / z - 1.0).astype(dtype, copy=False)
    dneg = (en / z[:, None]).astype(dtype, copy=False)
    return loss, dpos, dneg


LOSS_FNS = {
    "margin": margin_loss,
    "logistic": logistic_loss,
    "softmax": softmax_loss,
}


def compute_loss(kind: str, pos, neg, mask, margin: float = 0.0):
    if kind == "margin":
        return margin_loss(pos, neg, mask, margin)
    return LOSS_FNS[kind](pos, neg, mask)
