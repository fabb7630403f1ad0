"""Synthetic graph generators for benchmarks and end-to-end checks.

The clustered generator produces a learnable structure: entities belong to
clusters and edges overwhelmingly connect entities within one cluster, so a
trained model should rank true neighbors far above random candidates.
"""

from __future__ import annotations

import numpy as np

from .util import make_rng


def clustered_edges(
    n_entities: int,
    n_clusters: int,
    n_edges: int,
    n_relations: int = 1,
    noise: float = 0.05,
    seed: int = 0,
) -> np.ndarray:
    """(m, 3) int array of (src, rel, dst); dst is in src's cluster w.p. 1-noise."""
    rng = make_rng(seed, "clustered-graph")
    cluster_of = rng.integers(0, n_clusters, size=n_entities)
    members: list[np.ndarray] = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]
    # every cluster needs at least one member for the generator to work
    for c in range(n_clusters):
        if len(members[c]) == 0:
            cluster_of[c % n_entities] = c
    members = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]

    src = rng.integers(0, n_entities, size=n_edges)
    rel = rng.integers(0, n_relations, size=n_edges)
    dst = np.empty(n_edges, dtype=np.int64)
    in_cluster = rng.random(n_edges) >= noise
    # vectorized within-cluster draws, grouped by the source's cluster
    cl = cluster_of[src]
    for c in range(n_clusters):
        sel = np.flatnonzero(in_cluster & (cl == c))
        if len(sel):
            dst[sel] = members[c][rng.integers(0, len(members[c]), size=len(sel))]
    out = np.flatnonzero(~in_cluster)
    dst[out] = rng.integers(0, n_entities, size=len(out))
    return np.column_stack([src, rel, dst]).astype(np.int64)


def write_edges_tsv(
    path: str,
    edges: np.ndarray,
    relation_names: list[str] | None = None,
    entity_prefix: str = "e",
) -> None:
    """Write integer edges as the TSV surface format, in blocks."""
    n_rel = int(edges[:, 1].max()) + 1 if len(edges) else 0
    names = relation_names or [f"r{i}" for i in range(n_rel)]
    with open(path, "w", encoding="utf-8") as f:
        block = 1_000_000
        for lo in range(0, len(edges), block):
            rows = edges[lo : lo + block]
            f.write(
                "\n".join(
                    f"{entity_prefix}{s}\t{names[r]}\t{entity_prefix}{d}"
                    for s, r, d in rows
                )
            )
            f.write("\n")


def synthetic_config_dict(
    n_relations: int = 1,
    num_partitions: int = 1,
    dimension: int = 16,
    operator: str = "diagonal",
    **training,
) -> dict:
    """Config dict for a single-entity-type synthetic graph."""
    return {
        "entities": {"node": {"num_partitions": num_partitions}},
        "relations": [
            {"name": f"r{i}", "source_type": "node", "dest_type": "node", "operator": operator}
            for i in range(n_relations)
        ],
        "training": {"dimension": dimension, **training},
    }
