"""Chunked negative sampling and the batched loss over one chunk.

A batch of positive edges is split into chunks of C edges.  For each chunk
and each corruption side, the candidate pool is the chunk's own C entities
on that side (realizing the data-prevalence half of the negative mix)
concatenated with C_u uniform draws from the partition that is currently
resident.  With C == C_u the pool is an equal mix of data-distributed and
uniform entities.  Candidates equal to a positive's true entity are induced
positives and are masked out of the loss.

Every corrupted edge differs from its positive in exactly one endpoint:
source candidates replace the source, destination candidates the
destination, never both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import compute_loss
from .scoring import BlockScores, FoldedScores, RowScores


@dataclass
class NegativeSet:
    """Candidate entity indices for one chunk and one corruption side."""

    candidates: np.ndarray  # (n,) partition-local entity indices
    mask: np.ndarray  # (C, n) True where candidate == that positive's true entity
    num_in_chunk: int

    @property
    def num_usable(self) -> int:
        return self.mask.size - int(self.mask.sum())


def build_negative_set(
    true_entities: np.ndarray,
    uniform_count: int,
    partition_entity_count: int,
    rng: np.random.Generator,
) -> NegativeSet:
    """Build the candidate pool for one side of one chunk.

    `true_entities` are the chunk's own entities on the corrupted side; they
    double as the in-chunk candidates.  `uniform_count` extra candidates are
    drawn uniformly (with replacement) from the resident partition.
    """
    if partition_entity_count < 1:
        raise ValueError("cannot sample negatives from an empty partition")
    true_entities = np.asarray(true_entities)
    if uniform_count > 0:
        uni = rng.integers(0, partition_entity_count, size=uniform_count, dtype=np.int64)
        candidates = np.concatenate([true_entities.astype(np.int64), uni])
    else:
        candidates = true_entities.astype(np.int64)
    mask = candidates[None, :] == true_entities[:, None]
    return NegativeSet(candidates=candidates, mask=mask, num_in_chunk=len(true_entities))


@dataclass
class ChunkGrads:
    """Gradients of one chunk's loss w.r.t. every gathered block."""

    d_src: np.ndarray  # (C, d) positives' source rows
    d_dst: np.ndarray  # (C, d) positives' dest rows
    d_src_cand: np.ndarray  # (n_s, d) source-candidate rows
    d_dst_cand: np.ndarray  # (n_d, d) dest-candidate rows
    d_rel_fwd: np.ndarray | None  # per-row operator-parameter grads
    d_rel_rcp: np.ndarray | None = None


@dataclass
class ChunkStats:
    loss: float = 0.0
    edges: int = 0
    usable_negatives: int = 0


def chunk_loss_and_grads(
    src_rows: np.ndarray,
    dst_rows: np.ndarray,
    operator: str,
    sim: str,
    rel_fwd: np.ndarray | None,
    rel_rcp: np.ndarray | None,
    src_neg: NegativeSet,
    dst_neg: NegativeSet,
    src_cand_rows: np.ndarray,
    dst_cand_rows: np.ndarray,
    loss_kind: str,
    margin: float,
    rel_ids: np.ndarray | None = None,
) -> tuple[ChunkStats, ChunkGrads]:
    """Loss and gradients for one chunk, both corruption sides pooled.

    Destination corruption scores sim(src_i, g(cand_j, rel_i)) through the
    folded path; source corruption scores raw source candidates against the
    transformed destination rows.  With reciprocal parameters enabled the
    source side uses `rel_rcp` (including its own positive scores).
    """
    reciprocal = rel_rcp is not None

    # destination-side corruption (forward parameters)
    pos_fwd = RowScores(src_rows, dst_rows, operator, rel_fwd, sim)
    neg_d = FoldedScores(src_rows, operator, rel_fwd, dst_cand_rows, sim, rel_ids=rel_ids)
    loss_d, dp_d, dN = compute_loss(loss_kind, pos_fwd.scores, neg_d.scores, dst_neg.mask, margin)

    # source-side corruption (reciprocal parameters when enabled)
    pos_src = RowScores(src_rows, dst_rows, operator, rel_rcp, sim) if reciprocal else pos_fwd
    neg_s = BlockScores(dst_rows, operator, rel_rcp if reciprocal else rel_fwd, src_cand_rows, sim)
    loss_s, dp_s, dM = compute_loss(loss_kind, pos_src.scores, neg_s.scores, src_neg.mask, margin)

    dF1, dV1, dCd = neg_d.backward(dN)
    dF2, dD2, dV2 = pos_fwd.backward(dp_d)
    dD3, dV3, dCs = neg_s.backward(dM)
    if reciprocal:
        dF4, dD4, dV4 = pos_src.backward(dp_s)
    else:
        dF4, dD4, dV4 = pos_fwd.backward(dp_s)

    d_src = dF1 + dF2 + dF4
    d_dst = dD2 + dD3 + dD4

    def _acc(*gs):
        gs = [g for g in gs if g is not None]
        if not gs:
            return None
        out = gs[0]
        for g in gs[1:]:
            out = out + g
        return out

    if reciprocal:
        d_fwd = _acc(dV1, dV2)
        d_rcp = _acc(dV3, dV4)
    else:
        d_fwd = _acc(dV1, dV2, dV3, dV4)
        d_rcp = None

    stats = ChunkStats(
        loss=loss_d + loss_s,
        edges=len(src_rows),
        usable_negatives=src_neg.num_usable + dst_neg.num_usable,
    )
    grads = ChunkGrads(
        d_src=d_src,
        d_dst=d_dst,
        d_src_cand=dCs,
        d_dst_cand=dCd,
        d_rel_fwd=d_fwd,
        d_rel_rcp=d_rcp,
    )
    return stats, grads
