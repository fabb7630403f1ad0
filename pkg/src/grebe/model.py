"""In-memory parameter containers: embedding partitions and relation operators."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .config import Config, GraphSchema
from .optim import dense_adagrad_update
from .scoring import RelationParameters
from .util import make_rng


@dataclass
class EmbeddingPartition:
    """One partition of one entity type: value rows plus row-Adagrad state."""

    entity_type: str
    partition: int
    values: np.ndarray  # (count, d) float32
    acc: np.ndarray  # (count,) float32
    dirty: bool = False

    @property
    def count(self) -> int:
        return self.values.shape[0]


def init_partition(entity_type: str, partition: int, count: int, dim: int, seed: int) -> EmbeddingPartition:
    """Fresh partition: rows i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)], accumulators 0.

    The stream depends only on (seed, type, partition), so every process
    initializes a given partition identically.
    """
    rng = make_rng(seed, "init", entity_type, partition)
    scale = 1.0 / np.sqrt(dim)
    values = rng.uniform(-scale, scale, size=(count, dim)).astype(np.float32)
    return EmbeddingPartition(entity_type, partition, values, np.zeros(count, dtype=np.float32))


class RelationParameterSet:
    """Operator parameters for all relations, with elementwise Adagrad state.

    Vector-valued operators live in one (R, d) table; linear operators keep
    a (d, d) matrix per relation.  When reciprocal mode is on there is a
    second, independently trained parameter set used for source-side
    corruptions.  Initial parameters make every operator the identity map:
    zeros for translation, ones for diagonal, 1+0i for complex_diagonal and
    the identity matrix for linear.
    """

    def __init__(self, schema: GraphSchema, dim: int, reciprocal: bool):
        self.operators = [r.operator for r in schema.relations]
        self.sims = [r.resolved_similarity() for r in schema.relations]
        self.dim = dim
        self.reciprocal = reciprocal
        self.vec = np.stack([self._init_vec(op, dim) for op in self.operators])
        self.acc_vec = np.zeros_like(self.vec)
        self.lin = {
            i: np.eye(dim, dtype=np.float32) for i, op in enumerate(self.operators) if op == "linear"
        }
        self.acc_lin = {i: np.zeros((dim, dim), dtype=np.float32) for i in self.lin}
        if reciprocal:
            self.vec_rcp = self.vec.copy()
            self.acc_vec_rcp = np.zeros_like(self.vec)
            self.lin_rcp = {i: m.copy() for i, m in self.lin.items()}
            self.acc_lin_rcp = {i: np.zeros((dim, dim), dtype=np.float32) for i in self.lin}

    @staticmethod
    def _init_vec(op: str, dim: int) -> np.ndarray:
        v = np.zeros(dim, dtype=np.float32)
        if op == "diagonal":
            v[:] = 1.0
        elif op == "complex_diagonal":
            v[: dim // 2] = 1.0
        return v

    @property
    def num_relations(self) -> int:
        return len(self.operators)

    def gather(self, rel_ids: np.ndarray, side: str) -> np.ndarray | None:
        """Per-row parameter block for a chunk (all rows share one operator)."""
        op = self.operators[int(rel_ids[0])]
        rcp = side == "source" and self.reciprocal
        if op == "identity":
            return None
        if op == "linear":
            table = self.lin_rcp if rcp else self.lin
            return np.stack([table[int(r)] for r in rel_ids])
        table = self.vec_rcp if rcp else self.vec
        return table[rel_ids]

    def single(self, rel_id: int) -> RelationParameters:
        op = self.operators[rel_id]
        if op == "identity":
            return RelationParameters(op, None, None)
        if op == "linear":
            return RelationParameters(
                op, self.lin[rel_id], self.lin_rcp[rel_id] if self.reciprocal else None
            )
        return RelationParameters(
            op, self.vec[rel_id], self.vec_rcp[rel_id] if self.reciprocal else None
        )

    def apply_grad(self, rel_id: int, grad: np.ndarray, side: str, learning_rate: float) -> None:
        """One elementwise-Adagrad step on a single relation's parameters."""
        op = self.operators[rel_id]
        if op == "identity":
            return
        rcp = side == "source" and self.reciprocal
        if op == "linear":
            values = (self.lin_rcp if rcp else self.lin)[rel_id]
            acc = (self.acc_lin_rcp if rcp else self.acc_lin)[rel_id]
        else:
            values = (self.vec_rcp if rcp else self.vec)[rel_id]
            acc = (self.acc_vec_rcp if rcp else self.acc_vec)[rel_id]
        dense_adagrad_update(values, acc, grad, learning_rate)

    # -- checkpoint packing: one row per relation, d rows for linear ones,
    #    forward block first, then the reciprocal block when enabled.

    def rows_per_relation(self) -> list[int]:
        return [self.dim if op == "linear" else 1 for op in self.operators]

    def pack(self) -> tuple[np.ndarray, np.ndarray]:
        def block(vec, lin, acc_vec, acc_lin):
            vals, accs = [], []
            for i, op in enumerate(self.operators):
                if op == "linear":
                    vals.append(lin[i])
                    accs.append(acc_lin[i])
                else:
                    vals.append(vec[i][None, :])
                    accs.append(acc_vec[i][None, :])
            return np.concatenate(vals), np.concatenate(accs)

        v, a = block(self.vec, self.lin, self.acc_vec, self.acc_lin)
        if self.reciprocal:
            v2, a2 = block(self.vec_rcp, self.lin_rcp, self.acc_vec_rcp, self.acc_lin_rcp)
            v = np.concatenate([v, v2])
            a = np.concatenate([a, a2])
        return v, a

    def unpack(self, values: np.ndarray, acc: np.ndarray) -> None:
        rows = self.rows_per_relation()
        total = sum(rows) * (2 if self.reciprocal else 1)
        if values.shape != (total, self.dim):
            raise storage.StorageError(
                f"relation container shape {values.shape} != expected ({total}, {self.dim})"
            )

        def read_block(offset, vec, lin, acc_vec, acc_lin):
            for i, op in enumerate(self.operators):
                n = rows[i]
                if op == "linear":
                    lin[i][:] = values[offset : offset + n]
                    acc_lin[i][:] = acc[offset : offset + n]
                else:
                    vec[i] = values[offset]
                    acc_vec[i] = acc[offset]
                offset += n
            return offset

        off = read_block(0, self.vec, self.lin, self.acc_vec, self.acc_lin)
        if self.reciprocal:
            read_block(off, self.vec_rcp, self.lin_rcp, self.acc_vec_rcp, self.acc_lin_rcp)

    # -- shared-parameter keys for the parameter-server path

    def shared_keys(self) -> list[str]:
        keys = []
        for i, op in enumerate(self.operators):
            if op == "identity":
                continue
            keys.append(f"rel:{i}:fwd")
            if self.reciprocal:
                keys.append(f"rel:{i}:rcp")
        return keys

    def key_arrays(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        """(values, acc) arrays for one shared key; views into live state."""
        _, rid, side = key.split(":")
        rid = int(rid)
        rcp = side == "rcp"
        if self.operators[rid] == "linear":
            return (
                (self.lin_rcp if rcp else self.lin)[rid],
                (self.acc_lin_rcp if rcp else self.acc_lin)[rid],
            )
        return (
            (self.vec_rcp if rcp else self.vec)[rid],
            (self.acc_vec_rcp if rcp else self.acc_vec)[rid],
        )

    def set_key(self, key: str, values: np.ndarray) -> None:
        cur, _ = self.key_arrays(key)
        cur[:] = values.reshape(cur.shape)


@dataclass
class Model:
    """Everything the evaluator needs: resident embeddings plus operators."""

    config: Config
    partitions: dict[tuple[str, int], EmbeddingPartition] = field(default_factory=dict)
    relations: RelationParameterSet | None = None

    def entity_table(self, entity_type: str) -> tuple[np.ndarray, np.ndarray]:
        """Concatenate a type's partitions into one table.

        Returns (values, offsets) where global index = offsets[p] + local.
        """
        decl = self.config.schema.entity_types[entity_type]
        parts = [self.partitions[(entity_type, p)] for p in range(decl.num_partitions)]
        offsets = np.zeros(len(parts) + 1, dtype=np.int64)
        for p, part in enumerate(parts):
            offsets[p + 1] = offsets[p] + part.count
        return np.concatenate([p.values for p in parts]), offsets


def save_checkpoint(
    ckpt_dir: str,
    config: Config,
    partitions: dict[tuple[str, int], EmbeddingPartition],
    relations: RelationParameterSet,
    epoch: int,
    stats: dict | None = None,
    prune: bool = True,
) -> storage.Manifest:
    os.makedirs(ckpt_dir, exist_ok=True)
    entity_files: dict[str, dict[str, str]] = {}
    counts: dict[str, list[int]] = {}
    for (etype, p), part in sorted(partitions.items()):
        fn = storage.partition_filename(etype, p, epoch)
        storage.write_container(os.path.join(ckpt_dir, fn), part.values, part.acc)
        entity_files.setdefault(etype, {})[str(p)] = fn
        counts.setdefault(etype, [0] * config.schema.entity_types[etype].num_partitions)
        counts[etype][p] = part.count
    rel_fn, rel_acc_fn = storage.relation_filenames(epoch)
    rel_v, rel_a = relations.pack()
    storage.write_container(os.path.join(ckpt_dir, rel_fn), rel_v)
    storage.write_container(os.path.join(ckpt_dir, rel_acc_fn), rel_a)
    manifest = storage.Manifest(
        epoch=epoch,
        config_hash=config.config_hash(),
        entity_files=entity_files,
        relation_file=rel_fn,
        relation_acc_file=rel_acc_fn,
        entity_counts=counts,
        stats=stats,
    )
    storage.save_manifest(ckpt_dir, manifest)
    if prune:
        storage.prune_old_versions(ckpt_dir, epoch)
    return manifest


def load_checkpoint(ckpt_dir: str, config: Config) -> tuple[Model, storage.Manifest]:
    manifest = storage.load_manifest(ckpt_dir, expect_config_hash=config.config_hash())
    model = Model(config=config)
    for etype, parts in manifest.entity_files.items():
        for p_str, fn in parts.items():
            values, acc = storage.read_container(os.path.join(ckpt_dir, fn))
            model.partitions[(etype, int(p_str))] = EmbeddingPartition(
                etype, int(p_str), values, acc
            )
    relations = RelationParameterSet(
        config.schema, config.training.dimension, config.training.reciprocal_relations
    )
    rel_v, _ = storage.read_container(os.path.join(ckpt_dir, manifest.relation_file))
    rel_acc_v, _ = storage.read_container(os.path.join(ckpt_dir, manifest.relation_acc_file))
    relations.unpack(rel_v, rel_acc_v)
    model.relations = relations
    return model, manifest
