"""Negative-sampling throughput measurement.

Two sampling paths over the same synthetic graph:

  * batched -- the production path: chunks of B_n/2 edges share their
    in-chunk candidates plus B_n/2 uniform draws, scored as matrix products.
  * naive   -- the per-edge reference: every edge draws its own B_n
    candidates per side and every corrupted edge is materialized and scored
    individually.

Throughput is edges trained per second, including gradient computation and
in-place Adagrad updates, measured until a wallclock budget runs out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import Config, from_dict
from .model import RelationParameterSet, init_partition
from .optim import row_adagrad_update
from .scoring import score_edge
from .synth import synthetic_config_dict
from .trainer import BucketTrainer
from .util import make_rng


@dataclass
class BenchResult:
    mode: str
    bn: int
    edges: int
    seconds: float

    @property
    def edges_per_second(self) -> float:
        return self.edges / self.seconds if self.seconds > 0 else 0.0


def _bench_config(dim: int, bn: int, seed: int, learning_rate: float) -> Config:
    chunk = max(bn // 2, 1)
    return from_dict(
        synthetic_config_dict(
            dimension=dim,
            operator="identity",
            batch_size=chunk * 20,
            chunk_size=chunk,
            uniform_negatives_per_chunk=bn - chunk,
            loss="margin",
            margin=0.1,
            learning_rate=learning_rate,
            seed=seed,
        )
    )


def _measure_batched(table, edges, cfg: Config, budget_s: float, seed: int) -> tuple[int, float]:
    tables = {("node", 0): table}
    rels = RelationParameterSet(cfg.schema, cfg.training.dimension, False)
    bt = BucketTrainer(cfg, tables, (0, 0), rels)
    rng = make_rng(seed, "bench-batched")
    B = cfg.training.batch_size
    done = 0
    t0 = time.monotonic()
    pos = 0
    while time.monotonic() - t0 < budget_s:
        block = edges[pos : pos + B]
        if len(block) == 0:
            pos = 0
            continue
        loss, n = bt.run_shard(block, rng)
        done += n
        pos += B
    return done, time.monotonic() - t0


def _measure_naive(table, edges, cfg: Config, bn: int, budget_s: float, seed: int) -> tuple[int, float]:
    """Per-edge sampling: B_n fresh candidates per side, scored one by one."""
    values, acc = table.values, table.acc
    n_entities = values.shape[0]
    rels = RelationParameterSet(cfg.schema, cfg.training.dimension, False)
    rel = rels.single(0)
    sim = cfg.schema.relations[0].resolved_similarity()
    margin = cfg.training.margin
    lr = cfg.training.learning_rate
    rng = make_rng(seed, "bench-naive")
    done = 0
    t0 = time.monotonic()
    for s, _, d in edges:
        if done % 64 == 0 and time.monotonic() - t0 >= budget_s:
            break
        s, d = int(s), int(d)
        pos = score_edge(values[s], rel, values[d], sim)
        grads: dict[int, np.ndarray] = {}

        def add(idx, g):
            if idx in grads:
                grads[idx] += g
            else:
                grads[idx] = g.copy()

        # destination corruption: materialize (s, r, d') one at a time
        for cand in rng.integers(0, n_entities, size=bn):
            cand = int(cand)
            if cand == d:
                continue
            neg = score_edge(values[s], rel, values[cand], sim)
            if margin - pos + neg > 0:
                add(s, values[cand] - values[d])
                add(cand, values[s])
                add(d, -values[s])
        # source corruption: materialize (s', r, d)
        for cand in rng.integers(0, n_entities, size=bn):
            cand = int(cand)
            if cand == s:
                continue
            neg = score_edge(values[cand], rel, values[d], sim)
            if margin - pos + neg > 0:
                add(d, values[cand] - values[s])
                add(cand, values[d])
                add(s, -values[d])
        if grads:
            ids = np.fromiter(grads.keys(), dtype=np.int64)
            gmat = np.stack(list(grads.values()))
            row_adagrad_update(values, acc, ids, gmat, lr)
        done += 1
    return done, time.monotonic() - t0


def run_bench(
    dim: int = 100,
    n_entities: int = 100_000,
    n_edges: int = 1_000_000,
    bn_values: tuple[int, ...] = (10, 100),
    modes: tuple[str, ...] = ("batched", "naive"),
    budget_s: float = 3.0,
    seed: int = 0,
    learning_rate: float = 0.1,
) -> list[BenchResult]:
    rng = make_rng(seed, "bench-graph")
    edges = np.empty((n_edges, 3), dtype="<u4")
    edges[:, 0] = rng.integers(0, n_entities, size=n_edges)
    edges[:, 1] = 0
    edges[:, 2] = rng.integers(0, n_entities, size=n_edges)

    results = []
    for bn in bn_values:
        cfg = _bench_config(dim, bn, seed, learning_rate)
        for mode in modes:
            table = init_partition("node", 0, n_entities, dim, seed)
            if mode == "batched":
                done, secs = _measure_batched(table, edges, cfg, budget_s, seed)
            elif mode == "naive":
                done, secs = _measure_naive(table, edges, cfg, bn, budget_s, seed)
            else:
                raise ValueError(f"unknown bench mode {mode!r}")
            results.append(BenchResult(mode=mode, bn=bn, edges=done, seconds=secs))
    return results
