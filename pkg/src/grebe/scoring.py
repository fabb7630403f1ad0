"""Relation operators, similarities, and batched score computation.

An edge (s, r, d) is scored as  sim(theta_s, g(theta_d, theta_r)): the
relation operator is applied to the destination side and the source side
passes through untouched.  Five operators are supported:

    identity            g(x) = x
    translation         g(x) = x + v
    diagonal            g(x) = x * v
    complex_diagonal    g(x) = x * v as d/2 complex numbers
    linear              g(x) = A @ x

Complex vectors use a real encoding: the first d/2 entries are real parts,
the last d/2 imaginary parts.  Under this encoding the real part of the
Hermitian inner product Re{<a, conj(b)>} equals the plain real dot product,
so the ComplEx-style conjugation is folded into the operator (see
`fold_rows`) and `similarity(..., conjugate=True)` is the ordinary dot.

Three score paths exist, each with a hand-derived backward pass:

  * `RowScores`      -- per-row sim(F_i, g(T_i, V_i)) for positive edges.
  * `BlockScores`    -- sim matrix of transformed rows against raw candidate
                        rows (source-corruption side: candidates untouched).
  * `FoldedScores`   -- sim(F_i, g(C_j, V_i)) without materializing the
                        (rows x candidates x dim) tensor: for dot similarity
                        the operator folds exactly onto F via its adjoint;
                        for cosine the per-pair transformed norms are
                        recovered from matrix products.

All functions preserve the dtype of their inputs (float32 in training,
float64 in the finite-difference tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VECTOR_OPERATORS = ("translation", "diagonal", "complex_diagonal")


@dataclass
class RelationParameters:
    """Operator parameters for one relation, optionally with a reciprocal twin.

    `forward` is used when scoring destination-side corruptions, `reciprocal`
    (when present) when scoring source-side corruptions.
    """

    operator: str
    forward: np.ndarray | None
    reciprocal: np.ndarray | None = None

    def for_side(self, side: str) -> np.ndarray | None:
        if side not in ("source", "dest"):
            raise ValueError(f"side must be 'source' or 'dest', got {side!r}")
        if side == "source" and self.reciprocal is not None:
            return self.reciprocal
        return self.forward


def _halves(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = x.shape[-1] // 2
    return x[..., :h], x[..., h:]


def _check_rows(x: np.ndarray, v: np.ndarray | None, kind: str) -> None:
    if kind == "identity":
        return
    if v is None:
        raise ValueError(f"operator {kind!r} requires parameters")
    if kind == "linear":
        if v.shape[-2:] != (x.shape[-1], x.shape[-1]):
            raise ValueError(f"linear parameters {v.shape} do not match rows {x.shape}")
    elif v.shape[-1] != x.shape[-1]:
        raise ValueError(f"operator parameters {v.shape} do not match rows {x.shape}")
    if kind == "complex_diagonal" and x.shape[-1] % 2 != 0:
        raise ValueError("complex_diagonal requires an even dimension")


def transform_rows(X: np.ndarray, kind: str, V: np.ndarray | None) -> np.ndarray:
    """Apply g rowwise: row i of the output is g(X_i, V_i)."""
    _check_rows(X, V, kind)
    if kind == "identity":
        return X
    if kind == "translation":
        return X + V
    if kind == "diagonal":
        return X * V
    if kind == "complex_diagonal":
        xr, xi = _halves(X)
        vr, vi = _halves(V)
        return np.concatenate([xr * vr - xi * vi, xr * vi + xi * vr], axis=-1)
    if kind == "linear":
        # y_a = sum_b A_ab x_b, batched over rows
        return np.einsum("...ab,...b->...a", V, X)
    raise ValueError(f"unknown operator {kind!r}")


def transform_rows_vjp(
    dY: np.ndarray, X: np.ndarray, kind: str, V: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Backward of `transform_rows`: returns (dX, dV)."""
    if kind == "identity":
        return dY, None
    if kind == "translation":
        return dY, dY.copy()
    if kind == "diagonal":
        return dY * V, dY * X
    if kind == "complex_diagonal":
        xr, xi = _halves(X)
        vr, vi = _halves(V)
        dyr, dyi = _halves(dY)
        dX = np.concatenate([dyr * vr + dyi * vi, -dyr * vi + dyi * vr], axis=-1)
        dV = np.concatenate([dyr * xr + dyi * xi, -dyr * xi + dyi * xr], axis=-1)
        return dX, dV
    if kind == "linear":
        dX = np.einsum("...ab,...a->...b", V, dY)
        dV = np.einsum("...a,...b->...ab", dY, X)
        return dX, dV
    raise ValueError(f"unknown operator {kind!r}")


def fold_rows(
    F: np.ndarray, kind: str, V: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Adjoint fold: dot(F_i, g(C, V_i)) == dot(lhs_i, C) + add_i for any C.

    Returns (lhs, add) with add None when no additive term exists.  For
    complex_diagonal this is where the ComplEx conjugation lives: lhs is F
    complex-multiplied by conj(V), so a plain real dot against raw candidate
    rows reproduces Re{<F * V, conj(C)>}.
    """
    _check_rows(F, V, kind)
    if kind == "identity":
        return F, None
    if kind == "translation":
        return F, np.sum(F * V, axis=-1)
    if kind == "diagonal":
        return F * V, None
    if kind == "complex_diagonal":
        fr, fi = _halves(F)
        vr, vi = _halves(V)
        return np.concatenate([fr * vr + fi * vi, fi * vr - fr * vi], axis=-1), None
    if kind == "linear":
        return np.einsum("...ab,...a->...b", V, F), None
    raise ValueError(f"unknown operator {kind!r}")


def fold_rows_vjp(
    dlhs: np.ndarray,
    dadd: np.ndarray | None,
    F: np.ndarray,
    kind: str,
    V: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Backward of `fold_rows`: returns (dF, dV)."""
    if kind == "identity":
        return dlhs, None
    if kind == "translation":
        dF = dlhs + dadd[:, None] * V
        dV = dadd[:, None] * F
        return dF, dV
    if kind == "diagonal":
        return dlhs * V, dlhs * F
    if kind == "complex_diagonal":
        fr, fi = _halves(F)
        vr, vi = _halves(V)
        dlr, dli = _halves(dlhs)
        dF = np.concatenate([dlr * vr - dli * vi, dlr * vi + dli * vr], axis=-1)
        dV = np.concatenate([dlr * fr + dli * fi, dlr * fi - dli * fr], axis=-1)
        return dF, dV
    if kind == "linear":
        dF = np.einsum("...ab,...b->...a", V, dlhs)
        dV = np.einsum("...a,...b->...ab", F, dlhs)
        return dF, dV
    raise ValueError(f"unknown operator {kind!r}")


def _inv_norms(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row norms and their 0-safe inverses (zero rows get inverse 0)."""
    n = np.sqrt(np.sum(X * X, axis=-1))
    with np.errstate(divide="ignore"):
        inv = np.where(n > 0, 1.0 / np.where(n > 0, n, 1.0), 0.0)
    return n, inv.astype(X.dtype, copy=False)


# ---------------------------------------------------------------------------
# spec-level single-vector operations


def apply_operator(x: np.ndarray, rel: RelationParameters, side: str = "dest") -> np.ndarray:
    """Transform one embedding vector by the relation operator for `side`."""
    x = np.asarray(x)
    theta = rel.for_side(side)
    v = None if theta is None else np.asarray(theta)[None, :] if theta.ndim == 1 else np.asarray(theta)[None, :, :]
    return transform_rows(x[None, :], rel.operator, v)[0]


def similarity(a: np.ndarray, b: np.ndarray, kind: str = "dot", conjugate: bool = False) -> float:
    """Score two vectors.

    `conjugate=True` requests the real part of the Hermitian inner product;
    under the real encoding used here that equals the plain dot product (the
    conjugation is folded into the operator), so the flag is documentation.
    A cosine against a zero vector is defined as 0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    del conjugate  # equal to dot under the real encoding; see module docstring
    s = float(np.dot(a, b))
    if kind == "dot":
        return s
    if kind == "cosine":
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return s / (na * nb)
    raise ValueError(f"unknown similarity {kind!r}")


def score_matrix(
    lhs: np.ndarray,
    rhs: np.ndarray,
    rel: RelationParameters | None = None,
    similarity: str = "dot",
    conjugate: bool = False,
) -> np.ndarray:
    """All-pairs similarity of two row blocks.

    `lhs` must already be operator-transformed on the appropriate side (use
    `transform_rows` / `fold_rows`); `rel` and `conjugate` are accepted for
    interface symmetry but the conjugation is already folded (see module
    docstring), so only the similarity kind matters here.
    """
    del rel, conjugate
    if similarity == "dot":
        return lhs @ rhs.T
    if similarity == "cosine":
        _, inv_l = _inv_norms(lhs)
        _, inv_r = _inv_norms(rhs)
        return (lhs * inv_l[:, None]) @ (rhs * inv_r[:, None]).T
    raise ValueError(f"unknown similarity {similarity!r}")


def score_edge(
    src: np.ndarray,
    rel: RelationParameters,
    dst: np.ndarray,
    sim: str,
    side: str = "dest",
) -> float:
    """Score a single edge the slow, obvious way (reference path)."""
    return similarity(src, apply_operator(dst, rel, side), kind=sim)


# ---------------------------------------------------------------------------
# batched score paths with backward passes


class RowScores:
    """Positive-edge scores: p_i = sim(F_i, g(T_i, V_i)) rowwise."""

    def __init__(self, F, T, kind_op, V, sim):
        self.F, self.T, self.kind_op, self.V, self.sim = F, T, kind_op, V, sim
        self.U = transform_rows(T, kind_op, V)
        raw = np.sum(F * self.U, axis=-1)
        if sim == "dot":
            self.scores = raw
        elif sim == "cosine":
            _, self.inv_f = _inv_norms(F)
            _, self.inv_u = _inv_norms(self.U)
            self.scores = raw * self.inv_f * self.inv_u
        else:
            raise ValueError(f"unknown similarity {sim!r}")

    def backward(self, dp):
        F, U = self.F, self.U
        if self.sim == "dot":
            dF = dp[:, None] * U
            dU = dp[:, None] * F
        else:
            invf, invu = self.inv_f, self.inv_u
            p = self.scores
            dF = dp[:, None] * (U * (invf * invu)[:, None] - p[:, None] * F * (invf * invf)[:, None])
            dU = dp[:, None] * (F * (invf * invu)[:, None] - p[:, None] * U * (invu * invu)[:, None])
        dT, dV = transform_rows_vjp(dU, self.T, self.kind_op, self.V)
        return dF, dT, dV


class BlockScores:
    """M_ij = sim(g(T_i, V_i), C_j): fixed side transformed, candidates raw."""

    def __init__(self, T, kind_op, V, C, sim):
        self.T, self.kind_op, self.V, self.C, self.sim = T, kind_op, V, C, sim
        self.U = transform_rows(T, kind_op, V)
        if sim == "dot":
            self.scores = self.U @ C.T
        elif sim == "cosine":
            _, self.inv_u = _inv_norms(self.U)
            _, self.inv_c = _inv_norms(C)
            self.Un = self.U * self.inv_u[:, None]
            self.Cn = C * self.inv_c[:, None]
            self.scores = self.Un @ self.Cn.T
        else:
            raise ValueError(f"unknown similarity {sim!r}")

    def backward(self, dM):
        if self.sim == "dot":
            dU = dM @ self.C
            dC = dM.T @ self.U
        else:
            dUn = dM @ self.Cn
            dCn = dM.T @ self.Un
            dU = (dUn - np.sum(dUn * self.Un, axis=-1, keepdims=True) * self.Un) * self.inv_u[:, None]
            dC = (dCn - np.sum(dCn * self.Cn, axis=-1, keepdims=True) * self.Cn) * self.inv_c[:, None]
        dT, dV = transform_rows_vjp(dU, self.T, self.kind_op, self.V)
        return dT, dV, dC


def _pair_sqnorms(kind_op, V, C, n_rows):
    """Per-pair squared norms ||g(C_j, V_i)||^2 as a matrix product."""
    if kind_op == "identity":
        nc2 = np.sum(C * C, axis=-1)
        return np.broadcast_to(nc2[None, :], (n_rows, nc2.shape[0]))
    if kind_op == "translation":
        nc2 = np.sum(C * C, axis=-1)
        nv2 = np.sum(V * V, axis=-1)
        return nc2[None, :] + 2.0 * (V @ C.T) + nv2[:, None]
    if kind_op == "diagonal":
        return (V * V) @ (C * C).T
    if kind_op == "complex_diagonal":
        vr, vi = _halves(V)
        cr, ci = _halves(C)
        return (vr * vr + vi * vi) @ (cr * cr + ci * ci).T
    raise ValueError(f"no squared-norm recipe for operator {kind_op!r}")


class FoldedScores:
    """N_ij = sim(F_i, g(C_j, V_i)): candidates on the transformed side.

    Dot similarity uses the exact adjoint fold.  Cosine recovers the per-pair
    transformed norms from matrix products (translation/diagonal/complex);
    cosine+linear falls back to grouped candidate transforms and requires
    `rel_ids` to group rows sharing an operator matrix.
    """

    def __init__(self, F, kind_op, V, C, sim, rel_ids=None):
        self.F, self.kind_op, self.V, self.C, self.sim = F, kind_op, V, C, sim
        self.grouped = sim == "cosine" and kind_op == "linear"
        if self.grouped:
            if rel_ids is None:
                raise ValueError("cosine+linear needs rel_ids for grouped scoring")
            self.rel_ids = np.asarray(rel_ids)
            self._forward_grouped()
            return
        self.lhs, self.add = fold_rows(F, kind_op, V)
        num = self.lhs @ C.T
        if self.add is not None:
            num = num + self.add[:, None]
        if sim == "dot":
            self.scores = num
        elif sim == "cosine":
            self.num = num
            _, self.inv_f = _inv_norms(F)
            self.tn2 = _pair_sqnorms(kind_op, V, C, F.shape[0])
            tn = np.sqrt(np.maximum(self.tn2, 0))
            with np.errstate(divide="ignore"):
                self.inv_t = np.where(tn > 0, 1.0 / np.where(tn > 0, tn, 1.0), 0.0).astype(F.dtype, copy=False)
            self.scores = num * self.inv_f[:, None] * self.inv_t
        else:
            raise ValueError(f"unknown similarity {sim!r}")

    def _forward_grouped(self):
        F, V, C = self.F, self.V, self.C
        self.scores = np.empty((F.shape[0], C.shape[0]), dtype=F.dtype)
        self._groups = []
        _, inv_f = _inv_norms(F)
        self.inv_f = inv_f
        for rid in np.unique(self.rel_ids):
            rows = np.nonzero(self.rel_ids == rid)[0]
            A = V[rows[0]]
            Tc = C @ A.T  # g(C_j) = A C_j, batched as C A^T
            _, inv_tc = _inv_norms(Tc)
            Tcn = Tc * inv_tc[:, None]
            Fn = F[rows] * inv_f[rows, None]
            self.scores[rows] = Fn @ Tcn.T
            self._groups.append((rows, A, Tc, inv_tc, Tcn, Fn))

    def backward(self, dN):
        if self.grouped:
            return self._backward_grouped(dN)
        F, V, C = self.F, self.V, self.C
        kind = self.kind_op
        if self.sim == "dot":
            dnum = dN
        else:
            dnum = dN * self.inv_f[:, None] * self.inv_t
        dlhs = dnum @ C
        dC = dnum.T @ self.lhs
        dadd = np.sum(dnum, axis=-1) if self.add is not None else None
        dF, dV = fold_rows_vjp(dlhs, dadd, F, kind, V)
        if self.sim == "cosine":
            # row-norm term: dL/d||F_i|| pushed back into F
            s = np.sum(dN * self.scores, axis=-1)
            dF = dF - (s * self.inv_f * self.inv_f)[:, None] * F
            # per-pair transformed-norm term, through tn2 = tn^2
            W = -0.5 * dN * self.scores * self.inv_t * self.inv_t  # dL/dtn2
            if kind == "identity":
                dC = dC + 2.0 * np.sum(W, axis=0)[:, None] * C
            elif kind == "translation":
                col = np.sum(W, axis=0)
                row = np.sum(W, axis=-1)
                dC = dC + 2.0 * col[:, None] * C + 2.0 * (W.T @ V)
                dV = dV + 2.0 * (W @ C) + 2.0 * row[:, None] * V
            elif kind == "diagonal":
                dV = dV + 2.0 * V * (W @ (C * C))
                dC = dC + 2.0 * C * (W.T @ (V * V))
            elif kind == "complex_diagonal":
                vr, vi = _halves(V)
                cr, ci = _halves(C)
                dA = W @ (cr * cr + ci * ci)
                dB = W.T @ (vr * vr + vi * vi)
                dV = dV + np.concatenate([2.0 * vr * dA, 2.0 * vi * dA], axis=-1)
                dC = dC + np.concatenate([2.0 * cr * dB, 2.0 * ci * dB], axis=-1)
        return dF, dV, dC

    def _backward_grouped(self, dN):
        F, V, C = self.F, self.V, self.C
        dF = np.zeros_like(F)
        dV = np.zeros_like(V)
        dC = np.zeros_like(C)
        for rows, A, Tc, inv_tc, Tcn, Fn in self._groups:
            dM = dN[rows]
            dFn = dM @ Tcn
            dTcn = dM.T @ Fn
            inv_f = self.inv_f[rows]
            dF[rows] += (dFn - np.sum(dFn * Fn, axis=-1, keepdims=True) * Fn) * inv_f[:, None]
            dTc = (dTcn - np.sum(dTcn * Tcn, axis=-1, keepdims=True) * Tcn) * inv_tc[:, None]
            dA = dTc.T @ C  # Tc = C A^T -> dA = dTc^T C
            dC += dTc @ A
            # rows of a group share one matrix; spread the group total in
            # equal shares so a scatter-add over rows reproduces it exactly
            dV[rows] += dA[None, :, :] / len(rows)
        return dF, dV, dC
