"""Shared test utilities: finite differences and naive reference scoring."""

from __future__ import annotations

import numpy as np

from grebe.scoring import RelationParameters, score_edge

OPERATORS = ["identity", "translation", "diagonal", "complex_diagonal", "linear"]
SIMS = ["dot", "cosine"]
LOSSES = ["margin", "logistic", "softmax"]


def rand_params(rng, kind, n, d):
    if kind == "identity":
        return None
    if kind == "linear":
        return rng.normal(size=(n, d, d))
    return rng.normal(size=(n, d))


def finite_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / denom)


def naive_pair_scores(F, kind, V, C, sim):
    """Score every (row, candidate) pair through the single-edge path."""
    out = np.zeros((len(F), len(C)))
    for i in range(len(F)):
        rp = RelationParameters(kind, None if V is None else V[i if len(V) > 1 else 0])
        for j in range(len(C)):
            out[i, j] = score_edge(F[i], rp, C[j], sim)
    return out


def naive_row_scores(F, kind, V, T, sim):
    out = np.zeros(len(F))
    for i in range(len(F)):
        rp = RelationParameters(kind, None if V is None else V[i if len(V) > 1 else 0])
        out[i] = score_edge(F[i], rp, T[i], sim)
    return out
