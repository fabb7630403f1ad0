"""Edge-list ingestion: dictionaries, partition assignment, bucket files.

Input is a TSV edge list (`source \\t relation \\t dest`).  Every entity id
is assigned a partition by a stable 64-bit hash of the external id modulo P
(so membership does not depend on input order) and a dense local index in
first-appearance order within its partition.  Edges land in the bucket
named by their endpoints' partitions and are written as fixed-width binary
records: three little-endian u32 values (source local index, relation id,
dest local index).

Output directory layout::

    entities/<type>.dict    TSV: external_id, partition, local_index
    edges/bucket_<i>_<j>.bin
    meta.json               counts, grid shape, config hash
    train.tsv / valid.tsv / test.tsv   (when a split is requested)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .util import make_rng, stable_hash64

RECORD = struct.Struct("<III")

PACK_SHIFT = 40  # packed id: (partition << 40) | local_index
PACK_MASK = (1 << PACK_SHIFT) - 1


def unpack_id(packed: int) -> tuple[int, int]:
    """Packed dictionary value -> (partition, local index)."""
    return packed >> PACK_SHIFT, packed & PACK_MASK


class IngestError(RuntimeError):
    pass


@dataclass
class EntityDictionary:
    entity_type: str
    num_partitions: int
    packed: dict[str, int] = field(default_factory=dict)  # id -> (p << 40) | local
    counts: list[int] = field(default_factory=list)  # rows per partition

    def lookup(self, ext_id: str) -> tuple[int, int]:
        v = self.packed[ext_id]
        return v >> PACK_SHIFT, v & PACK_MASK

    def __len__(self) -> int:
        return len(self.packed)

    def by_partition(self) -> list[list[str]]:
        """Reverse map: per partition, external ids in local-index order."""
        out: list[list[str]] = [[""] * c for c in self.counts]
        for ext, v in self.packed.items():
            out[v >> PACK_SHIFT][v & PACK_MASK] = ext
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for ext, v in self.packed.items():
                f.write(f"{ext}\t{v >> PACK_SHIFT}\t{v & PACK_MASK}\n")

    @classmethod
    def load(cls, path: str, entity_type: str, num_partitions: int) -> "EntityDictionary":
        d = cls(entity_type, num_partitions)
        counts = [0] * num_partitions
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                ext, p, local = line.rstrip("\n").split("\t")
                p, local = int(p), int(local)
                d.packed[ext] = (p << PACK_SHIFT) | local
                counts[p] = max(counts[p], local + 1)
        d.counts = counts
        return d


def iter_edges(path: str):
    """Yield (source, relation, dest) string triples from a TSV edge list."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestError(f"{path}:{lineno}: expected 3 tab-separated fields")
            yield parts


def build_dictionaries(
    edge_paths: list[str], config: Config, min_count: int = 0
) -> dict[str, EntityDictionary]:
    """Count entities over the edge list(s) and assign partitions/local indices.

    Entities appearing fewer than `min_count` times are dropped from the
    dictionary (and their edges are later dropped by `bucketize`).
    """
    schema = config.schema
    rel_types = {r.name: (r.source_type, r.dest_type) for r in schema.relations}
    occurrences: dict[str, dict[str, int]] = {t: {} for t in schema.entity_types}
    total = 0
    for path in edge_paths:
        for src, rel, dst in iter_edges(path):
            try:
                st, dt = rel_types[rel]
            except KeyError:
                raise IngestError(f"unknown relation name {rel!r}") from None
            occurrences[st][src] = occurrences[st].get(src, 0) + 1
            occurrences[dt][dst] = occurrences[dt].get(dst, 0) + 1
            total += 1
    if total == 0:
        raise IngestError("empty edge list")

    dicts: dict[str, EntityDictionary] = {}
    for tname, decl in schema.entity_types.items():
        p_count = decl.num_partitions
        d = EntityDictionary(tname, p_count)
        next_local = [0] * p_count
        for ext, n in occurrences[tname].items():
            if n < min_count:
                continue
            p = stable_hash64(ext) % p_count
            d.packed[ext] = (p << PACK_SHIFT) | next_local[p]
            next_local[p] += 1
        d.counts = next_local
        dicts[tname] = d
    return dicts


def bucketize(
    edge_path: str,
    dicts: dict[str, EntityDictionary],
    config: Config,
    out_dir: str,
) -> tuple[dict[tuple[int, int], int], int]:
    """Write per-bucket binary edge files; returns (bucket counts, dropped count).

    Edges touching entities absent from the dictionaries (min-count filtered)
    are dropped, not fatal.  Within each bucket file edges keep input order.
    """
    schema = config.schema
    rel_ids = {r.name: i for i, r in enumerate(schema.relations)}
    rel_types = {r.name: (r.source_type, r.dest_type) for r in schema.relations}
    edges_dir = os.path.join(out_dir, "edges")
    os.makedirs(edges_dir, exist_ok=True)

    # packed ids are collected in fixed-size numpy blocks to keep memory flat
    # on very large edge lists
    blocks: list[np.ndarray] = []
    buf = np.empty((1 << 20, 3), dtype=np.int64)
    fill = 0
    dropped = 0
    for src, rel, dst in iter_edges(edge_path):
        st, dt = rel_types[rel]
        ps = dicts[st].packed.get(src)
        pd = dicts[dt].packed.get(dst)
        if ps is None or pd is None:
            dropped += 1
            continue
        buf[fill, 0] = ps
        buf[fill, 1] = rel_ids[rel]
        buf[fill, 2] = pd
        fill += 1
        if fill == len(buf):
            blocks.append(buf.copy())
            fill = 0
    blocks.append(buf[:fill].copy())
    packed = np.concatenate(blocks)
    src_arr = packed[:, 0]
    rel_arr = packed[:, 1].astype(np.uint32)
    dst_arr = packed[:, 2]
    src_p = (src_arr >> PACK_SHIFT).astype(np.int32)
    dst_p = (dst_arr >> PACK_SHIFT).astype(np.int32)
    src_local = (src_arr & PACK_MASK).astype(np.uint32)
    dst_local = (dst_arr & PACK_MASK).astype(np.uint32)

    n_src, n_dst = schema.grid_shape()
    counts: dict[tuple[int, int], int] = {}
    for i in range(n_src):
        for j in range(n_dst):
            sel = (src_p == i) & (dst_p == j)
            rec = np.empty((int(sel.sum()), 3), dtype="<u4")
            rec[:, 0] = src_local[sel]
            rec[:, 1] = rel_arr[sel]
            rec[:, 2] = dst_local[sel]
            rec.tofile(os.path.join(edges_dir, bucket_filename(i, j)))
            counts[(i, j)] = rec.shape[0]
    return counts, dropped


def bucket_filename(i: int, j: int) -> str:
    return f"bucket_{i}_{j}.bin"


def read_bucket(path: str, expect_count: int | None = None) -> np.ndarray:
    """Load one bucket file as an (m, 3) uint32 array of (src, rel, dst)."""
    size = os.path.getsize(path)
    if size % RECORD.size != 0:
        raise IngestError(f"{path}: size {size} is not a whole number of records")
    arr = np.fromfile(path, dtype="<u4").reshape(-1, 3)
    if expect_count is not None and arr.shape[0] != expect_count:
        raise IngestError(f"{path}: {arr.shape[0]} records, manifest says {expect_count}")
    return arr


def train_valid_test_split(
    edge_path: str,
    fractions: tuple[float, float, float],
    seed: int,
    out_dir: str,
    names: tuple[str, str, str] = ("train.tsv", "valid.tsv", "test.tsv"),
) -> tuple[list[str], list[int]]:
    """Split an edge list into disjoint files by per-edge uniform assignment."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise IngestError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    os.makedirs(out_dir, exist_ok=True)
    rng = make_rng(seed, "split")
    paths = [os.path.join(out_dir, n) for n in names]
    counts = [0, 0, 0]
    t1 = fractions[0]
    t2 = fractions[0] + fractions[1]
    outs = [open(p, "w", encoding="utf-8") for p in paths]
    try:
        block: np.ndarray = np.empty(0)
        used = 0
        with open(edge_path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                if used >= block.shape[0]:
                    block = rng.random(65536)
                    used = 0
                u = block[used]
                used += 1
                k = 0 if u < t1 else (1 if u < t2 else 2)
                outs[k].write(line)
                counts[k] += 1
    finally:
        for o in outs:
            o.close()
    return paths, counts


@dataclass
class IngestStats:
    edges_total: int
    edges_dropped: int
    bucket_counts: dict[tuple[int, int], int]
    entity_counts: dict[str, list[int]]
    split_counts: list[int] | None = None


def run_ingest(
    edge_path: str,
    config: Config,
    out_dir: str,
    min_count: int = 0,
    split: tuple[float, float, float] | None = None,
    seed: int | None = None,
) -> IngestStats:
    """Full ingestion: optional split, dictionaries from the full list, buckets.

    Dictionaries are always built from the complete edge list so that edges
    in the held-out splits only reference entities that have embeddings.
    When a split is requested only the train portion is bucketized.
    """
    os.makedirs(out_dir, exist_ok=True)
    seed = config.training.seed if seed is None else seed

    split_counts = None
    train_path = edge_path
    if split is not None:
        (train_path, _, _), split_counts = train_valid_test_split(
            edge_path, split, seed, out_dir
        )

    dicts = build_dictionaries([edge_path], config, min_count=min_count)
    ent_dir = os.path.join(out_dir, "entities")
    os.makedirs(ent_dir, exist_ok=True)
    for tname, d in dicts.items():
        d.save(os.path.join(ent_dir, f"{tname}.dict"))

    bucket_counts, dropped = bucketize(train_path, dicts, config, out_dir)
    total = sum(bucket_counts.values())

    meta = {
        "format": "grebe-data",
        "version": 1,
        "config_hash": config.config_hash(),
        "grid": list(config.schema.grid_shape()),
        "edges_total": total,
        "edges_dropped": dropped,
        "buckets": {f"{i},{j}": c for (i, j), c in sorted(bucket_counts.items())},
        "entity_counts": {t: d.counts for t, d in dicts.items()},
        "min_count": min_count,
        "split_counts": split_counts,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")

    return IngestStats(
        edges_total=total,
        edges_dropped=dropped,
        bucket_counts=bucket_counts,
        entity_counts={t: d.counts for t, d in dicts.items()},
        split_counts=split_counts,
    )


def load_meta(data_dir: str) -> dict:
    with open(os.path.join(data_dir, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format") != "grebe-data":
        raise IngestError(f"{data_dir} is not an ingested data directory")
    return meta


def load_dictionaries(data_dir: str, config: Config) -> dict[str, EntityDictionary]:
    out = {}
    for tname, decl in config.schema.entity_types.items():
        path = os.path.join(data_dir, "entities", f"{tname}.dict")
        out[tname] = EntityDictionary.load(path, tname, decl.num_partitions)
    return out


def bucket_path(data_dir: str, i: int, j: int) -> str:
    return os.path.join(data_dir, "edges", bucket_filename(i, j))
