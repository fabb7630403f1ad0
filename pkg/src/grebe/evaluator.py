"""Link-prediction evaluation: per-edge ranks, MRR/MR/Hits@k, raw and filtered.

Each test edge is ranked twice: once against source-side corruptions and
once against destination-side corruptions, and both rank lists are pooled
into the aggregates.  The rank is pessimistic about ties:

    rank = 1 + |{candidate c != true entity : score(c) >= score(edge)}|

so a constant-score model cannot look good.  Filtered mode additionally
removes candidates that would form an edge present in the supplied filter
sets (typically train+valid+test).  Candidates are either every entity of
the corrupted side's type or a sampled set (uniform or proportional to
training-set prevalence); sampled candidates are drawn once per evaluation
batch and shared by its edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ingest
from .config import Config
from .model import Model
from .scoring import score_matrix, transform_rows
from .util import make_rng

_KEY_SHIFT = 40  # (relation << 40) | global entity id


@dataclass
class EvalSettings:
    mode: str = "raw"  # raw | filtered
    candidates: str = "all"  # all | sampled:<n>:prevalence | sampled:<n>:uniform
    hits_at: tuple[int, ...] = (1, 10, 50)
    seed: int = 0
    batch_size: int = 1024

    def parse_candidates(self) -> tuple[str, int, str]:
        if self.candidates == "all":
            return "all", 0, ""
        parts = self.candidates.split(":")
        if len(parts) != 3 or parts[0] != "sampled" or parts[2] not in ("prevalence", "uniform"):
            raise ValueError(f"bad candidate scheme {self.candidates!r}")
        return "sampled", int(parts[1]), parts[2]


@dataclass
class RankReport:
    mode: str
    candidates: str
    num_edges: int
    skipped: int
    src_ranks: np.ndarray
    dst_ranks: np.ndarray
    hits_at: tuple[int, ...]

    @property
    def ranks(self) -> np.ndarray:
        """Both corruption sides pooled."""
        return np.concatenate([self.src_ranks, self.dst_ranks])

    @property
    def mrr(self) -> float:
        return float(np.mean(1.0 / self.ranks)) if self.ranks.size else 0.0

    @property
    def mr(self) -> float:
        return float(np.mean(self.ranks)) if self.ranks.size else 0.0

    def hits(self, k: int) -> float:
        return float(np.mean(self.ranks <= k)) if self.ranks.size else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "candidates": self.candidates,
            "num_edges": self.num_edges,
            "skipped": self.skipped,
            "mrr": self.mrr,
            "mr": self.mr,
            "hits": {str(k): self.hits(k) for k in self.hits_at},
        }

    def summary_line(self) -> str:
        hits = " ".join(f"hits@{k}={self.hits(k):.4f}" for k in self.hits_at)
        return (
            f"eval mode={self.mode} candidates={self.candidates} edges={self.num_edges} "
            f"mrr={self.mrr:.4f} mr={self.mr:.2f} {hits}"
        )


def rank_edge(
    pos_score: float,
    cand_scores: np.ndarray,
    cand_ids: np.ndarray,
    true_id: int,
    known_ids: np.ndarray | None = None,
) -> int:
    """Rank one edge against explicit candidates (reference path, one side)."""
    valid = cand_ids != true_id
    if known_ids is not None and len(known_ids):
        valid &= ~np.isin(cand_ids, known_ids)
    return 1 + int(np.sum((cand_scores >= pos_score) & valid))


def sample_candidates(
    num_entities: int,
    n: int,
    scheme: str,
    frequencies: np.ndarray | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Candidate entity ids, drawn with replacement.

    `prevalence` weights entities by their training-set occurrence count
    (source and destination occurrences combined); `uniform` ignores it.
    """
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if scheme == "uniform":
        return rng.integers(0, num_entities, size=n, dtype=np.int64)
    if scheme != "prevalence":
        raise ValueError(f"unknown sampling scheme {scheme!r}")
    if frequencies is None:
        raise ValueError("prevalence sampling needs a training-frequency table")
    total = frequencies.sum()
    if total <= 0:
        raise ValueError("prevalence table is empty")
    return rng.choice(num_entities, size=n, replace=True, p=frequencies / total)


class KnownEdges:
    """Sorted (relation, endpoint) -> other-endpoint index for filtered ranking.

    Duplicate edges are collapsed so a competitor is only ever removed once.
    """

    @staticmethod
    def _build(keys: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        order = np.lexsort((vals, keys))
        keys, vals = keys[order], vals[order]
        if len(keys):
            first = np.concatenate([[True], (keys[1:] != keys[:-1]) | (vals[1:] != vals[:-1])])
            keys, vals = keys[first], vals[first]
        return keys, vals

    def __init__(self, edges: np.ndarray):
        key_sd = (edges[:, 1].astype(np.int64) << _KEY_SHIFT) | edges[:, 0]
        self._sd_keys, self._sd_vals = self._build(key_sd, edges[:, 2])
        key_ds = (edges[:, 1].astype(np.int64) << _KEY_SHIFT) | edges[:, 2]
        self._ds_keys, self._ds_vals = self._build(key_ds, edges[:, 0])

    def _lookup(self, keys, vals, rel: int, ent: int) -> np.ndarray:
        key = (int(rel) << _KEY_SHIFT) | int(ent)
        lo = np.searchsorted(keys, key, side="left")
        hi = np.searchsorted(keys, key, side="right")
        return vals[lo:hi]

    def dests_for(self, rel: int, src: int) -> np.ndarray:
        return self._lookup(self._sd_keys, self._sd_vals, rel, src)

    def sources_for(self, rel: int, dst: int) -> np.ndarray:
        return self._lookup(self._ds_keys, self._ds_vals, rel, dst)


def map_edges(
    tsv_path: str, config: Config, dicts: dict[str, ingest.EntityDictionary],
    offsets: dict[str, np.ndarray],
) -> tuple[np.ndarray, int]:
    """TSV edges -> (m, 3) array of (src global, rel id, dst global); skips unknowns."""
    rel_ids = {r.name: i for i, r in enumerate(config.schema.relations)}
    rel_types = {r.name: (r.source_type, r.dest_type) for r in config.schema.relations}
    rows, skipped = [], 0
    for src, rel, dst in ingest.iter_edges(tsv_path):
        st, dt = rel_types[rel]
        ps = dicts[st].packed.get(src)
        pd = dicts[dt].packed.get(dst)
        if ps is None or pd is None:
            skipped += 1
            continue
        sp, sl = ingest.unpack_id(ps)
        dp, dl = ingest.unpack_id(pd)
        rows.append((int(offsets[st][sp]) + sl, rel_ids[rel], int(offsets[dt][dp]) + dl))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3), skipped


def training_frequencies(data_dir: str, config: Config) -> dict[str, np.ndarray]:
    """Per entity type, global occurrence counts over the bucketized train edges."""
    meta = ingest.load_meta(data_dir)
    counts = {t: np.array(c, dtype=np.int64) for t, c in meta["entity_counts"].items()}
    offsets = {t: np.concatenate([[0], np.cumsum(c)]) for t, c in counts.items()}
    freqs = {t: np.zeros(int(c.sum()), dtype=np.int64) for t, c in counts.items()}
    src_type = np.array(
        [list(config.schema.entity_types).index(r.source_type) for r in config.schema.relations]
    )
    dst_type = np.array(
        [list(config.schema.entity_types).index(r.dest_type) for r in config.schema.relations]
    )
    type_names = list(config.schema.entity_types)
    for key in meta["buckets"]:
        i, j = map(int, key.split(","))
        arr = ingest.read_bucket(ingest.bucket_path(data_dir, i, j))
        if not len(arr):
            continue
        rels = arr[:, 1].astype(np.int64)
        for t_idx, tname in enumerate(type_names):
            sel = src_type[rels] == t_idx
            if sel.any():
                p = i if config.schema.entity_types[tname].partitioned else 0
                ids = arr[sel, 0].astype(np.int64) + offsets[tname][p]
                freqs[tname] += np.bincount(ids, minlength=len(freqs[tname]))
            sel = dst_type[rels] == t_idx
            if sel.any():
                p = j if config.schema.entity_types[tname].partitioned else 0
                ids = arr[sel, 2].astype(np.int64) + offsets[tname][p]
                freqs[tname] += np.bincount(ids, minlength=len(freqs[tname]))
    return freqs


@dataclass
class _TypeTable:
    values: np.ndarray
    offsets: np.ndarray
    frequencies: np.ndarray | None = None


def evaluate_edges(
    edges: np.ndarray,
    model: Model,
    settings: EvalSettings,
    known: KnownEdges | None = None,
    frequencies: dict[str, np.ndarray] | None = None,
    skipped: int = 0,
) -> RankReport:
    """Rank pre-mapped edges (global indices) against the model."""
    cfg = model.config
    if settings.mode == "filtered" and known is None:
        raise ValueError("filtered mode needs a KnownEdges set")
    scheme, n_sample, dist = settings.parse_candidates()
    tables: dict[str, _TypeTable] = {}
    for tname in cfg.schema.entity_types:
        values, offsets = model.entity_table(tname)
        tables[tname] = _TypeTable(
            values, offsets, None if frequencies is None else frequencies.get(tname)
        )

    m = len(edges)
    src_ranks = np.zeros(m, dtype=np.int64)
    dst_ranks = np.zeros(m, dtype=np.int64)
    rng = make_rng(settings.seed, "eval-candidates")

    rel_order = np.argsort(edges[:, 1], kind="stable")
    bounds = np.flatnonzero(np.diff(edges[rel_order, 1])) + 1
    for group in np.split(rel_order, bounds):
        if not len(group):
            continue
        rid = int(edges[group[0], 1])
        rel_decl = cfg.schema.relations[rid]
        sim = rel_decl.resolved_similarity()
        op = rel_decl.operator
        src_tab = tables[rel_decl.source_type]
        dst_tab = tables[rel_decl.dest_type]
        rel = model.relations.single(rid)

        for bstart in range(0, len(group), settings.batch_size):
            rows = group[bstart : bstart + settings.batch_size]
            e = edges[rows]
            src_vecs = src_tab.values[e[:, 0]]
            dst_vecs = dst_tab.values[e[:, 2]]

            # --- destination-side corruption: sim(src_i, g(cand, theta_fwd))
            dst_ranks[rows] = _rank_side(
                fixed_vecs=src_vecs,
                true_ids=e[:, 2],
                cand_table=dst_tab,
                op=op,
                theta=rel.for_side("dest"),
                sim=sim,
                transform_candidates=True,
                scheme=scheme,
                n_sample=n_sample,
                dist=dist,
                rng=rng,
                known_lists=(
                    [known.dests_for(rid, int(s)) for s in e[:, 0]]
                    if settings.mode == "filtered"
                    else None
                ),
            )

            # --- source-side corruption: sim(cand, g(dst_i, theta_rcp))
            theta_s = rel.for_side("source")
            v = None
            if theta_s is not None:
                v = theta_s[None, :] if theta_s.ndim == 1 else theta_s[None, :, :]
            u = transform_rows(dst_vecs, op, v)
            src_ranks[rows] = _rank_side(
                fixed_vecs=u,
                true_ids=e[:, 0],
                cand_table=src_tab,
                op=op,
                theta=None,
                sim=sim,
                transform_candidates=False,
                scheme=scheme,
                n_sample=n_sample,
                dist=dist,
                rng=rng,
                known_lists=(
                    [known.sources_for(rid, int(d)) for d in e[:, 2]]
                    if settings.mode == "filtered"
                    else None
                ),
            )

    return RankReport(
        mode=settings.mode,
        candidates=settings.candidates,
        num_edges=m,
        skipped=skipped,
        src_ranks=src_ranks,
        dst_ranks=dst_ranks,
        hits_at=settings.hits_at,
    )


def _rank_side(
    fixed_vecs: np.ndarray,
    true_ids: np.ndarray,
    cand_table: _TypeTable,
    op: str,
    theta: np.ndarray | None,
    sim: str,
    transform_candidates: bool,
    scheme: str,
    n_sample: int,
    dist: str,
    rng: np.random.Generator,
    known_lists: list[np.ndarray] | None,
) -> np.ndarray:
    """Ranks for one corruption side of one batch.

    `fixed_vecs` is the untouched side of each edge (already transformed if
    the operator lives on it); candidates are rows of `cand_table`, possibly
    operator-transformed.  The positive score is taken from the candidate
    matrix in all-candidates mode and recomputed pairwise in sampled mode.
    """
    n_entities = cand_table.values.shape[0]
    if scheme == "all":
        cand_ids = None
        cand_rows = cand_table.values
    else:
        cand_ids = sample_candidates(n_entities, n_sample, dist, cand_table.frequencies, rng)
        cand_rows = cand_table.values[cand_ids]

    v = None
    if transform_candidates and theta is not None:
        v = theta[None, :] if theta.ndim == 1 else theta[None, :, :]
        cand_rows = transform_rows(cand_rows, op, v)

    scores = score_matrix(fixed_vecs, cand_rows, similarity=sim)

    if scheme == "all":
        pos = scores[np.arange(len(true_ids)), true_ids]
    else:
        true_rows = cand_table.values[true_ids]
        if transform_candidates:
            true_rows = transform_rows(true_rows, op, v)
        pos = _row_sim(fixed_vecs, true_rows, sim)

    b = len(true_ids)
    if cand_ids is None:
        counts = np.zeros(b, dtype=np.int64)
        ge = scores >= pos[:, None]
        for k in range(b):
            row = ge[k]
            exclude = 1 if row[true_ids[k]] else 0
            c = int(row.sum()) - exclude
            if known_lists is not None:
                kn = known_lists[k]
                if len(kn):
                    kn = kn[kn != true_ids[k]]
                    c -= int(row[kn].sum())
            counts[k] = c
    else:
        valid = cand_ids[None, :] != true_ids[:, None]
        if known_lists is not None:
            for k in range(b):
                kn = known_lists[k]
                if len(kn):
                    valid[k] &= ~np.isin(cand_ids, kn)
        counts = np.sum((scores >= pos[:, None]) & valid, axis=1)
    return counts + 1


def _row_sim(a: np.ndarray, b: np.ndarray, sim: str) -> np.ndarray:
    s = np.sum(a * b, axis=-1)
    if sim == "dot":
        return s
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    denom = na * nb
    out = np.where(denom > 0, s / np.where(denom > 0, denom, 1.0), 0.0)
    return out.astype(a.dtype, copy=False)


def evaluate(
    edges_path: str,
    model: Model,
    data_dir: str,
    settings: EvalSettings,
    filter_paths: list[str] | None = None,
) -> RankReport:
    """Evaluate a TSV split against a model, resolving ids via the data dir."""
    cfg = model.config
    dicts = ingest.load_dictionaries(data_dir, cfg)
    offsets = {}
    for tname in cfg.schema.entity_types:
        _, offs = model.entity_table(tname)
        offsets[tname] = offs
    edges, skipped = map_edges(edges_path, cfg, dicts, offsets)

    known = None
    if settings.mode == "filtered":
        if not filter_paths:
            raise ValueError("filtered mode needs --filter-edges paths")
        parts = []
        for p in filter_paths:
            arr, _ = map_edges(p, cfg, dicts, offsets)
            parts.append(arr)
        known = KnownEdges(np.concatenate(parts))

    freqs = None
    scheme, _, dist = settings.parse_candidates()
    if scheme == "sampled" and dist == "prevalence":
        freqs = training_frequencies(data_dir, cfg)

    return evaluate_edges(edges, model, settings, known=known, frequencies=freqs, skipped=skipped)


def export_embeddings(
    model: Model, data_dir: str, out_path: str, entity_type: str | None = None
) -> int:
    """Write `external_id \\t v0 ... v{d-1}` rows for one or all entity types."""
    cfg = model.config
    dicts = ingest.load_dictionaries(data_dir, cfg)
    types = [entity_type] if entity_type else list(cfg.schema.entity_types)
    n = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for tname in types:
            values, offsets = model.entity_table(tname)
            for p, names in enumerate(dicts[tname].by_partition()):
                base = int(offsets[p])
                for local, ext in enumerate(names):
                    row = values[base + local]
                    f.write(ext + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
                    n += 1
    return n
