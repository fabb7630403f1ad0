"""Single-machine training loop: partition swapping, lock-free workers, checkpoints.

An epoch walks the buckets in inside-out order.  Before each bucket the
partitions it does not need are evicted (written to the working directory
when dirty) and the ones it needs are loaded, so at most two partitions of
each partitioned entity type are ever resident; unpartitioned types stay
resident for the whole run.  A bucket's edges are shuffled and split into
contiguous shards, one per worker; workers update the shared tables in
place with no synchronization whatsoever (benign races are accepted, and
single-worker runs are bitwise reproducible).

Checkpoints are written at every epoch boundary as epoch-versioned
container files plus a manifest; a crash mid-epoch leaves the previous
manifest (and the files it references) untouched, so resuming replays the
interrupted epoch exactly.
"""

from __future__ import annotations

import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ingest, storage
from .config import Config
from .model import EmbeddingPartition, RelationParameterSet, init_partition
from .negatives import build_negative_set, chunk_loss_and_grads
from .optim import row_adagrad_update
from .scheduler import inside_out_order
from .util import kv_line, make_rng

logger = logging.getLogger("grebe.trainer")


class ParamSink:
    """Hook for routing shared-parameter gradients elsewhere (distributed mode).

    Return False to have the trainer apply the update locally.
    """

    def relation_grad(self, rel_id: int, side: str, grad: np.ndarray) -> bool:
        return False

    def entity_rows_grad(self, entity_type: str, row_ids: np.ndarray, grads: np.ndarray) -> bool:
        return False


@dataclass
class HolderStats:
    loads: int = 0
    evictions: int = 0
    dirty_writes: int = 0
    peak_partitioned_rows: int = 0
    current_partitioned_rows: int = 0


class EmbeddingHolder:
    """Resident embedding partitions with disk swap and residency accounting."""

    def __init__(self, config: Config, state_dir: str, counts: dict[str, list[int]]):
        self.config = config
        self.state_dir = state_dir
        self.counts = counts
        self.resident: dict[tuple[str, int], EmbeddingPartition] = {}
        self.stats = HolderStats()
        os.makedirs(state_dir, exist_ok=True)

    def _path(self, etype: str, p: int) -> str:
        return os.path.join(self.state_dir, f"{etype}.p{p}.bin")

    def materialize_all(self, from_checkpoint: storage.Manifest | None, ckpt_dir: str | None) -> None:
        """Populate the working directory for every partition (init or copy)."""
        seed = self.config.training.seed
        dim = self.config.training.dimension
        for etype, decl in self.config.schema.entity_types.items():
            for p in range(decl.num_partitions):
                dst = self._path(etype, p)
                if from_checkpoint is not None:
                    src = os.path.join(ckpt_dir, from_checkpoint.entity_files[etype][str(p)])
                    shutil.copyfile(src, dst)
                else:
                    part = init_partition(etype, p, self.counts[etype][p], dim, seed)
                    storage.write_container(dst, part.values, part.acc)
        # unpartitioned types are resident for the whole run
        for etype, decl in self.config.schema.entity_types.items():
            if not decl.partitioned:
                self._load(etype, 0)

    def _load(self, etype: str, p: int) -> EmbeddingPartition:
        values, acc = storage.read_container(self._path(etype, p))
        part = EmbeddingPartition(etype, p, values, acc)
        self.resident[(etype, p)] = part
        self.stats.loads += 1
        if self.config.schema.entity_types[etype].partitioned:
            self.stats.current_partitioned_rows += part.count
            self.stats.peak_partitioned_rows = max(
                self.stats.peak_partitioned_rows, self.stats.current_partitioned_rows
            )
        return part

    def _evict(self, key: tuple[str, int]) -> None:
        part = self.resident.pop(key)
        if part.dirty:
            storage.write_container(self._path(*key), part.values, part.acc)
            self.stats.dirty_writes += 1
        self.stats.evictions += 1
        if self.config.schema.entity_types[key[0]].partitioned:
            self.stats.current_partitioned_rows -= part.count

    def ensure(self, needed: set[tuple[str, int]]) -> None:
        """Evict partitioned residents not in `needed`, then load the rest."""
        for key in [k for k in self.resident if k not in needed]:
            if self.config.schema.entity_types[key[0]].partitioned:
                self._evict(key)
        for key in sorted(needed):
            if key not in self.resident:
                self._load(*key)
        per_type: dict[str, int] = {}
        for etype, p in self.resident:
            if self.config.schema.entity_types[etype].partitioned:
                per_type[etype] = per_type.get(etype, 0) + 1
        assert all(n <= 2 for n in per_type.values()), f"residency invariant broken: {per_type}"

    def get(self, etype: str, p: int) -> EmbeddingPartition:
        return self.resident[(etype, p)]

    def flush(self) -> None:
        for key, part in self.resident.items():
            if part.dirty:
                storage.write_container(self._path(*key), part.values, part.acc)
                part.dirty = False


@dataclass
class BucketStats:
    bucket: tuple[int, int]
    edges: int = 0
    loss_sum: float = 0.0
    seconds: float = 0.0

    @property
    def mean_loss(self) -> float | None:
        return self.loss_sum / self.edges if self.edges else None


@dataclass
class EpochStats:
    epoch: int
    seconds: float = 0.0
    edges: int = 0
    loss_sum: float = 0.0
    loads: int = 0
    evictions: int = 0
    buckets: list[BucketStats] = field(default_factory=list)

    @property
    def mean_loss(self) -> float | None:
        return self.loss_sum / self.edges if self.edges else None


def _bucket_tables(config: Config, bucket: tuple[int, int]) -> dict[int, tuple]:
    """Per relation id: (src table key, dst table key, operator, similarity)."""
    i, j = bucket
    out = {}
    for rid, rel in enumerate(config.schema.relations):
        st = config.schema.entity_types[rel.source_type]
        dt = config.schema.entity_types[rel.dest_type]
        src_key = (rel.source_type, i if st.partitioned else 0)
        dst_key = (rel.dest_type, j if dt.partitioned else 0)
        out[rid] = (src_key, dst_key, rel.operator, rel.resolved_similarity())
    return out


def needed_partitions(config: Config, bucket: tuple[int, int]) -> set[tuple[str, int]]:
    needed = set()
    for src_key, dst_key, _, _ in _bucket_tables(config, bucket).values():
        needed.add(src_key)
        needed.add(dst_key)
    for etype, decl in config.schema.entity_types.items():
        if not decl.partitioned:
            needed.add((etype, 0))
    return needed


def _group_codes(config: Config) -> np.ndarray:
    """Relation id -> chunk-group code.

    Chunks must be homogeneous in (entity types, operator, similarity) so
    candidates have a well-defined entity type; linear relations are also
    split per relation so each chunk shares one operator matrix (which then
    applies as a single matrix-multiply).
    """
    keys = {}
    codes = np.zeros(len(config.schema.relations), dtype=np.int64)
    for rid, rel in enumerate(config.schema.relations):
        key = (
            rel.source_type,
            rel.dest_type,
            rel.operator,
            rel.resolved_similarity(),
            rid if rel.operator == "linear" else -1,
        )
        codes[rid] = keys.setdefault(key, len(keys))
    return codes


class BucketTrainer:
    """Trains batches of one bucket against the resident partition tables."""

    def __init__(
        self,
        config: Config,
        tables: dict[tuple[str, int], EmbeddingPartition],
        bucket: tuple[int, int],
        relations: RelationParameterSet,
        sink: ParamSink | None = None,
    ):
        self.config = config
        self.tconf = config.training
        self.tables = tables
        self.bucket = bucket
        self.relations = relations
        self.sink = sink or ParamSink()
        self.rel_tables = _bucket_tables(config, bucket)
        self.group_codes = _group_codes(config)

    def _chunk(self, rows: np.ndarray, rid0: int, rng, acc, rel_acc) -> tuple[float, int]:
        src_key, dst_key, op, sim = self.rel_tables[rid0]
        src_part = self.tables[src_key]
        dst_part = self.tables[dst_key]
        src_idx = rows[:, 0].astype(np.int64)
        rel_ids = rows[:, 1].astype(np.int64)
        dst_idx = rows[:, 2].astype(np.int64)

        src_neg = build_negative_set(
            src_idx, self.tconf.uniform_negatives_per_chunk, src_part.count, rng
        )
        dst_neg = build_negative_set(
            dst_idx, self.tconf.uniform_negatives_per_chunk, dst_part.count, rng
        )

        rel_fwd = self.relations.gather(rel_ids, "dest")
        rel_rcp = self.relations.gather(rel_ids, "source") if self.tconf.reciprocal_relations else None
        if op == "linear" and rel_fwd is not None:
            rel_fwd = rel_fwd[:1]  # chunks are per-relation for linear: one shared matrix
            if rel_rcp is not None:
                rel_rcp = rel_rcp[:1]

        stats, grads = chunk_loss_and_grads(
            src_part.values[src_idx],
            dst_part.values[dst_idx],
            op,
            sim,
            rel_fwd,
            rel_rcp,
            src_neg,
            dst_neg,
            src_part.values[src_neg.candidates],
            dst_part.values[dst_neg.candidates],
            self.tconf.loss,
            self.tconf.margin,
            rel_ids=rel_ids,
        )

        acc.setdefault(src_key, ([], []))
        acc.setdefault(dst_key, ([], []))
        acc[src_key][0].extend((src_idx, src_neg.candidates))
        acc[src_key][1].extend((grads.d_src, grads.d_src_cand))
        acc[dst_key][0].extend((dst_idx, dst_neg.candidates))
        acc[dst_key][1].extend((grads.d_dst, grads.d_dst_cand))

        for side, g in (("dest", grads.d_rel_fwd), ("source", grads.d_rel_rcp)):
            if g is None:
                continue
            if op == "linear":
                key = (int(rel_ids[0]), side)
                rel_acc[key] = rel_acc.get(key, 0) + g[0]
            else:
                uniq, inv = np.unique(rel_ids, return_inverse=True)
                sums = np.zeros((len(uniq),) + g.shape[1:], dtype=g.dtype)
                np.add.at(sums, inv, g)
                for k, rid in enumerate(uniq):
                    key = (int(rid), side)
                    rel_acc[key] = rel_acc.get(key, 0) + sums[k]
        return stats.loss, stats.edges

    def _apply_batch(self, acc, rel_acc) -> None:
        lr = self.tconf.learning_rate
        for (etype, p), (idx_list, grad_list) in acc.items():
            idx = np.concatenate(idx_list)
            grads = np.concatenate(grad_list)
            uniq, inv = np.unique(idx, return_inverse=True)
            agg = np.zeros((len(uniq), grads.shape[1]), dtype=grads.dtype)
            np.add.at(agg, inv, grads)
            if self.sink.entity_rows_grad(etype, uniq, agg):
                continue
            part = self.tables[(etype, p)]
            row_adagrad_update(part.values, part.acc, uniq, agg, lr)
            part.dirty = True
        for (rid, side), grad in rel_acc.items():
            if self.sink.relation_grad(rid, side, grad):
                continue
            self.relations.apply_grad(rid, grad, side, lr)

    def run_shard(self, edges: np.ndarray, rng: np.random.Generator) -> tuple[float, int]:
        """Train one worker's contiguous shard; returns (loss sum, edge count)."""
        B = self.tconf.batch_size
        C = self.tconf.chunk_size
        codes = self.group_codes
        loss_sum, count = 0.0, 0
        for start in range(0, len(edges), B):
            batch = edges[start : start + B]
            order = np.argsort(codes[batch[:, 1]], kind="stable")
            batch = batch[order]
            bounds = np.flatnonzero(np.diff(codes[batch[:, 1]])) + 1
            acc: dict = {}
            rel_acc: dict = {}
            for run in np.split(batch, bounds):
                for cstart in range(0, len(run), C):
                    rows = run[cstart : cstart + C]
                    loss, n = self._chunk(rows, int(rows[0, 1]), rng, acc, rel_acc)
                    loss_sum += loss
                    count += n
            self._apply_batch(acc, rel_acc)
        return loss_sum, count


def train_bucket(
    config: Config,
    tables: dict[tuple[str, int], EmbeddingPartition],
    bucket: tuple[int, int],
    edges: np.ndarray,
    relations: RelationParameterSet,
    epoch: int,
    sink: ParamSink | None = None,
    pass_index: int = 0,
    num_workers: int | None = None,
    seed: int | None = None,
) -> BucketStats:
    """Shuffle, shard across workers, and train one bucket's edges in place."""
    t0 = time.monotonic()
    stats = BucketStats(bucket=bucket)
    if len(edges) == 0:
        return stats
    seed = config.training.seed if seed is None else seed
    workers = num_workers or config.training.num_workers

    shuffle_rng = make_rng(seed, "shuffle", epoch, bucket[0], bucket[1], pass_index)
    edges = edges[shuffle_rng.permutation(len(edges))]

    bt = BucketTrainer(config, tables, bucket, relations, sink)
    shards = []
    for w in range(workers):
        lo = len(edges) * w // workers
        hi = len(edges) * (w + 1) // workers
        if hi > lo:
            rng = make_rng(seed, "negatives", epoch, bucket[0], bucket[1], pass_index, w)
            shards.append((edges[lo:hi], rng))

    if len(shards) == 1:
        results = [bt.run_shard(*shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(lambda s: bt.run_shard(*s), shards))
    for loss, n in results:
        stats.loss_sum += loss
        stats.edges += n
    stats.seconds = time.monotonic() - t0
    return stats


@dataclass
class TrainResult:
    checkpoint_dir: str
    epochs: list[EpochStats]
    holder_stats: HolderStats


def run_epochs(
    config: Config,
    data_dir: str,
    checkpoint_dir: str,
    num_epochs: int | None = None,
    num_workers: int | None = None,
    sink: ParamSink | None = None,
    checkpoint_every_bucket: bool = False,
) -> TrainResult:
    """Train for `num_epochs`, checkpointing each epoch; resumes when possible."""
    meta = ingest.load_meta(data_dir)
    if meta["config_hash"] != config.config_hash():
        raise ValueError(
            f"data dir {data_dir} was ingested with config hash {meta['config_hash']}, "
            f"current config is {config.config_hash()}"
        )
    epochs_to_run = config.training.num_epochs if num_epochs is None else num_epochs
    if num_workers is not None:
        workers = num_workers
    else:
        workers = config.training.num_workers

    counts = {t: list(map(int, c)) for t, c in meta["entity_counts"].items()}
    n_src, n_dst = meta["grid"]
    order = inside_out_order(n_src, n_dst)
    bucket_counts = {tuple(map(int, k.split(","))): v for k, v in meta["buckets"].items()}

    os.makedirs(checkpoint_dir, exist_ok=True)
    state_dir = os.path.join(checkpoint_dir, "state")
    holder = EmbeddingHolder(config, state_dir, counts)
    relations = RelationParameterSet(
        config.schema, config.training.dimension, config.training.reciprocal_relations
    )

    start_epoch = 1
    try:
        manifest = storage.load_manifest(checkpoint_dir, expect_config_hash=config.config_hash())
        holder.materialize_all(manifest, checkpoint_dir)
        rel_v, _ = storage.read_container(os.path.join(checkpoint_dir, manifest.relation_file))
        rel_a, _ = storage.read_container(os.path.join(checkpoint_dir, manifest.relation_acc_file))
        relations.unpack(rel_v, rel_a)
        start_epoch = manifest.epoch + 1
        logger.info(kv_line("resume", epoch=manifest.epoch, checkpoint=checkpoint_dir))
    except storage.StorageError as e:
        if os.path.exists(os.path.join(checkpoint_dir, storage.MANIFEST)):
            raise  # incompatible checkpoint: refuse rather than clobber
        holder.materialize_all(None, None)
        logger.debug("fresh start: %s", e)

    epoch_stats: list[EpochStats] = []
    passes = config.training.bucket_passes_per_epoch
    for epoch in range(start_epoch, epochs_to_run + 1):
        es = EpochStats(epoch=epoch)
        t0 = time.monotonic()
        loads0, evict0 = holder.stats.loads, holder.stats.evictions
        for pass_index in range(passes):
            for bucket in order:
                n_edges = bucket_counts.get(bucket, 0)
                if n_edges == 0:
                    continue
                holder.ensure(needed_partitions(config, bucket))
                edges = ingest.read_bucket(
                    ingest.bucket_path(data_dir, *bucket), expect_count=n_edges
                )
                if passes > 1:
                    part_rng = make_rng(config.training.seed, "passes", epoch, *bucket)
                    perm = part_rng.permutation(n_edges)
                    lo = n_edges * pass_index // passes
                    hi = n_edges * (pass_index + 1) // passes
                    edges = edges[perm[lo:hi]]
                bs = train_bucket(
                    config,
                    holder.resident,
                    bucket,
                    edges,
                    relations,
                    epoch,
                    sink=sink,
                    pass_index=pass_index,
                    num_workers=workers,
                )
                es.buckets.append(bs)
                es.edges += bs.edges
                es.loss_sum += bs.loss_sum
                logger.info(
                    kv_line(
                        "bucket_done",
                        epoch=epoch,
                        bucket=f"{bucket[0]},{bucket[1]}",
                        edges=bs.edges,
                        mean_loss=bs.mean_loss if bs.mean_loss is not None else "nan",
                        seconds=bs.seconds,
                    )
                )
                if checkpoint_every_bucket:
                    holder.flush()
        es.seconds = time.monotonic() - t0
        es.loads = holder.stats.loads - loads0
        es.evictions = holder.stats.evictions - evict0
        epoch_stats.append(es)

        holder.flush()
        _checkpoint_from_state(checkpoint_dir, state_dir, config, counts, relations, epoch, es, holder)
        logger.info(
            kv_line(
                "epoch_done",
                epoch=epoch,
                edges=es.edges,
                mean_loss=es.mean_loss if es.mean_loss is not None else "nan",
                seconds=es.seconds,
                loads=es.loads,
                evictions=es.evictions,
                peak_resident_rows=holder.stats.peak_partitioned_rows,
            )
        )

    return TrainResult(checkpoint_dir, epoch_stats, holder.stats)


def _checkpoint_from_state(
    checkpoint_dir: str,
    state_dir: str,
    config: Config,
    counts: dict[str, list[int]],
    relations: RelationParameterSet,
    epoch: int,
    es: EpochStats | None,
    holder: EmbeddingHolder,
) -> None:
    """Copy working state into epoch-versioned files and publish the manifest."""
    entity_files: dict[str, dict[str, str]] = {}
    for etype, decl in config.schema.entity_types.items():
        for p in range(decl.num_partitions):
            fn = storage.partition_filename(etype, p, epoch)
            shutil.copyfile(
                os.path.join(state_dir, f"{etype}.p{p}.bin"),
                os.path.join(checkpoint_dir, fn),
            )
            entity_files.setdefault(etype, {})[str(p)] = fn
    rel_fn, rel_acc_fn = storage.relation_filenames(epoch)
    rel_v, rel_a = relations.pack()
    storage.write_container(os.path.join(checkpoint_dir, rel_fn), rel_v)
    storage.write_container(os.path.join(checkpoint_dir, rel_acc_fn), rel_a)
    stats = None
    if es is not None:
        stats = {
            "epoch_seconds": es.seconds,
            "mean_loss": es.mean_loss,
            "loads": es.loads,
            "evictions": es.evictions,
            "peak_resident_rows": holder.stats.peak_partitioned_rows,
        }
    manifest = storage.Manifest(
        epoch=epoch,
        config_hash=config.config_hash(),
        entity_files=entity_files,
        relation_file=rel_fn,
        relation_acc_file=rel_acc_fn,
        entity_counts=counts,
        stats=stats,
    )
    storage.save_manifest(checkpoint_dir, manifest)
    storage.prune_old_versions(checkpoint_dir, epoch)
