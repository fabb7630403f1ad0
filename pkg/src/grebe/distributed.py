"""Distributed training: lock server, partition servers, parameter servers.

One trainer process per rank.  The flow for a bucket mirrors the lock-then-
transfer dance: a trainer ACQUIREs a bucket (its previous bucket, if any, is
still locked), PUTs the partitions it no longer needs to the sharded
partition servers and GETs the ones it now needs, and only then RELEASEs the
old bucket.  Because a partition is never unlocked before its bytes are
stored, a later GET by another trainer always sees the freshest state, and
no two trainers ever mutate one partition concurrently.

Shared parameters (relation operators and unpartitioned entity tables, keys
"rel:<id>:<side>" and "ent:<type>") live on the parameter servers, which
apply pushed gradient sums with their own Adagrad state (elementwise for
"rel:", row-wise for "ent:").  Each trainer runs one background sync thread
that pushes accumulated gradients and adopts fetched values; trainers do not
step shared parameters locally, so a gradient is applied exactly once.
Training itself proceeds on possibly stale values between syncs.

Bucket edges are read from the shared filesystem (the ingested data dir);
rank 0 writes epoch checkpoints while the other ranks wait at the barrier.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import ingest, storage, wire
from .config import Config
from .model import EmbeddingPartition, RelationParameterSet, init_partition
from .optim import dense_adagrad_update, row_adagrad_update
from .scheduler import SchedulerState
from .trainer import (
    EpochStats,
    HolderStats,
    ParamSink,
    TrainResult,
    needed_partitions,
    train_bucket,
)
from .util import kv_line, stable_hash64

logger = logging.getLogger("grebe.distributed")

BIND_ENV = "GREBE_BIND_ADDRESS"


@dataclass
class ClusterSpec:
    """Static cluster manifest: addresses, rank count, shared paths."""

    lock_server: str
    partition_servers: list[str]
    param_servers: list[str]
    num_ranks: int
    data_dir: str
    checkpoint_dir: str

    @classmethod
    def load(cls, path: str) -> "ClusterSpec":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            lock_server=d["lock_server"],
            partition_servers=list(d["partition_servers"]),
            param_servers=list(d["param_servers"]),
            num_ranks=int(d["num_ranks"]),
            data_dir=d["data_dir"],
            checkpoint_dir=d["checkpoint_dir"],
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)
            f.write("\n")


def parse_address(addr: str) -> tuple[str, int]:
    host, port = addr.rsplit(":", 1)
    return host, int(port)


def bind_address(requested: str | None) -> tuple[str, int]:
    """Resolve a bind address: explicit flag, else env override, else any port."""
    addr = requested or os.environ.get(BIND_ENV) or "127.0.0.1:0"
    return parse_address(addr)


def partition_shard(entity_type: str, partition: int, n_shards: int) -> int:
    """Static shard placement known to every node."""
    return stable_hash64(f"{entity_type}:{partition}") % n_shards


def param_shard(key: str, n_shards: int) -> int:
    return stable_hash64(key) % n_shards


# ---------------------------------------------------------------------------
# server plumbing


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service = self.server.service  # type: ignore[attr-defined]
        service.on_connect(self)
        try:
            while True:
                try:
                    tag, payload = wire.read_message(self.request)
                except (ConnectionError, OSError):
                    return
                reply = service.handle_message(self, tag, payload)
                if reply is not None:
                    wire.send_message(self.request, *reply)
        except wire.ProtocolError as e:
            logger.warning("protocol error from %s: %s", self.client_address, e)
        finally:
            service.on_disconnect(self)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Service:
    """Base for the three servers; one instance serves many connections."""

    def on_connect(self, handler) -> None:
        pass

    def on_disconnect(self, handler) -> None:
        pass

    def handle_message(self, handler, tag: int, payload: bytes):
        raise NotImplementedError

    def serve(self, bind: str | None = None) -> tuple[_ThreadingServer, str]:
        """Start serving on a background thread; returns (server, address)."""
        host, port = bind_address(bind)
        srv = _ThreadingServer((host, port), _Handler)
        srv.service = self  # type: ignore[attr-defined]
        addr = f"{srv.server_address[0]}:{srv.server_address[1]}"
        t = threading.Thread(target=srv.serve_forever, name=type(self).__name__, daemon=True)
        t.start()
        return srv, addr


class LockServer(Service):
    """Bucket locking and epoch barriers around a SchedulerState."""

    def __init__(self, n_src: int, n_dst: int, num_ranks: int):
        self.state = SchedulerState(n_src, n_dst)
        self.num_ranks = num_ranks
        self.cond = threading.Condition()
        self._held_by_conn: dict[int, set] = {}
        self._barrier_arrivals = 0
        self._barrier_generation = 0
        self.grant_log: list[tuple] = []  # (event, bucket, rank, monotonic time)

    def on_connect(self, handler):
        with self.cond:
            self._held_by_conn[id(handler)] = set()

    def on_disconnect(self, handler):
        with self.cond:
            held = self._held_by_conn.pop(id(handler), set())
            for bucket in held:
                # client died holding a lock: unlock, leave retrainable
                self.state.release(bucket, trained=False)
                self.grant_log.append(("abandon", bucket, -1, time.monotonic()))
            if held:
                self.cond.notify_all()

    def handle_message(self, handler, tag, payload):
        if tag == wire.TAG_ACQUIRE:
            rank, held_parts = wire.unpack_acquire(payload)
            with self.cond:
                bucket = self.state.acquire(rank, held_parts)
                if bucket is None:
                    return wire.TAG_NONE_AVAILABLE, wire.pack_none_available(
                        self.state.epoch_complete(), 1000
                    )
                self._held_by_conn[id(handler)].add(bucket)
                self.grant_log.append(("grant", bucket, rank, time.monotonic()))
                return wire.TAG_GRANT, wire.pack_bucket(*bucket)
        if tag == wire.TAG_RELEASE:
            bucket, trained = wire.unpack_bucket(payload)
            with self.cond:
                self.state.release(bucket, trained=trained)
                self._held_by_conn[id(handler)].discard(bucket)
                self.grant_log.append(("release", bucket, -1, time.monotonic()))
                self.cond.notify_all()
            return wire.TAG_ACK, b""
        if tag == wire.TAG_EPOCH_BARRIER:
            wire.unpack_barrier(payload)
            with self.cond:
                gen = self._barrier_generation
                self._barrier_arrivals += 1
                if self._barrier_arrivals >= self.num_ranks and self.state.epoch_complete():
                    self.state.reset_epoch()
                    self._barrier_arrivals = 0
                    self._barrier_generation += 1
                    self.cond.notify_all()
                else:
                    while self._barrier_generation == gen:
                        self.cond.wait()
            return wire.TAG_ACK, b""
        raise wire.ProtocolError(f"lock server cannot handle tag {tag}")


class PartitionServer(Service):
    """In-memory partition blob store, optionally spilling to a directory."""

    def __init__(self, spill_dir: str | None = None):
        self.blobs: dict[tuple[str, int], bytes] = {}
        self.lock = threading.Lock()
        self.spill_dir = spill_dir
        self._active: dict[tuple[str, int], int] = {}
        self.overlap_events = 0  # concurrent ops on one partition (must stay 0)
        if spill_dir:
            os.makedirs(spill_dir, exist_ok=True)

    def _spill_path(self, key):
        return os.path.join(self.spill_dir, f"{key[0]}.p{key[1]}.bin")

    def _enter(self, key):
        with self.lock:
            self._active[key] = self._active.get(key, 0) + 1
            if self._active[key] > 1:
                self.overlap_events += 1

    def _exit(self, key):
        with self.lock:
            self._active[key] -= 1

    def handle_message(self, handler, tag, payload):
        if tag == wire.TAG_PART_GET:
            etype, p, _ = wire.unpack_part_key(payload)
            key = (etype, p)
            self._enter(key)
            try:
                with self.lock:
                    blob = self.blobs.get(key)
                if blob is None and self.spill_dir and os.path.exists(self._spill_path(key)):
                    with open(self._spill_path(key), "rb") as f:
                        blob = f.read()
                if blob is None:
                    return wire.TAG_NONE_AVAILABLE, wire.pack_none_available(False, 0)
                return wire.TAG_PART_DATA, blob
            finally:
                self._exit(key)
        if tag == wire.TAG_PART_PUT:
            etype, p, blob = wire.unpack_part_put(payload)
            key = (etype, p)
            self._enter(key)
            try:
                storage.parse_container(blob)  # reject corrupt payloads early
                if self.spill_dir:
                    with open(self._spill_path(key), "wb") as f:
                        f.write(blob)
                    with self.lock:
                        self.blobs.pop(key, None)
                else:
                    with self.lock:
                        self.blobs[key] = blob
                return wire.TAG_ACK, b""
            finally:
                self._exit(key)
        raise wire.ProtocolError(f"partition server cannot handle tag {tag}")


class ParamServer(Service):
    """Shared-parameter store applying pushed gradient sums with Adagrad.

    Keys starting "ent:" hold entity tables and use row-wise Adagrad state;
    everything else (relation parameters) uses elementwise state.  State
    mutations are serialized per key.
    """

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.entries: dict[str, dict] = {}
        self.lock = threading.Lock()

    def _entry(self, key):
        with self.lock:
            return self.entries.get(key)

    def handle_message(self, handler, tag, payload):
        if tag == wire.TAG_PARAM_FETCH:
            key = wire.unpack_param_fetch(payload)
            e = self._entry(key)
            if e is None:
                return wire.TAG_NONE_AVAILABLE, wire.pack_none_available(False, 0)
            with e["lock"]:
                return wire.TAG_PARAM_VALUES, wire.pack_param_values(
                    e["version"], e["values"], e["acc"]
                )
        if tag == wire.TAG_PARAM_PUSH_ACC:
            mode, key, data = wire.unpack_param_push(payload)
            if mode == wire.PUSH_INIT:
                with self.lock:
                    if key not in self.entries:
                        rowwise = key.startswith("ent:")
                        self.entries[key] = {
                            "values": data.copy(),
                            "acc": np.zeros(
                                data.shape[0] if rowwise else data.shape, dtype=np.float32
                            ),
                            "version": 0,
                            "rowwise": rowwise,
                            "lock": threading.Lock(),
                        }
                return wire.TAG_ACK, b""
            e = self._entry(key)
            if e is None:
                return wire.TAG_NONE_AVAILABLE, wire.pack_none_available(False, 0)
            with e["lock"]:
                if e["rowwise"]:
                    touched = np.flatnonzero(np.any(data != 0, axis=tuple(range(1, data.ndim))))
                    if len(touched):
                        row_adagrad_update(
                            e["values"], e["acc"], touched, data[touched], self.learning_rate
                        )
                else:
                    dense_adagrad_update(e["values"], e["acc"], data, self.learning_rate)
                e["version"] += 1
            return wire.TAG_ACK, b""
        raise wire.ProtocolError(f"param server cannot handle tag {tag}")


# ---------------------------------------------------------------------------
# clients


class Connection:
    """One request/reply socket; serialized so callers can share it."""

    def __init__(self, addr: str):
        host, port = parse_address(addr)
        self.sock = socket.create_connection((host, port))
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.lock = threading.Lock()

    def request(self, tag: int, payload: bytes = b"") -> tuple[int, bytes]:
        with self.lock:
            wire.send_message(self.sock, tag, payload)
            return wire.read_message(self.sock)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class LockClient:
    def __init__(self, addr: str):
        self.conn = Connection(addr)

    def acquire(self, rank: int, held: set[int]) -> tuple[tuple[int, int] | None, bool]:
        """Returns (bucket or None, epoch_complete)."""
        tag, payload = self.conn.request(wire.TAG_ACQUIRE, wire.pack_acquire(rank, held))
        if tag == wire.TAG_GRANT:
            bucket, _ = wire.unpack_bucket(payload)
            return bucket, False
        complete, _retry = wire.unpack_none_available(payload)
        return None, complete

    def release(self, bucket: tuple[int, int], trained: bool = True) -> None:
        self.conn.request(wire.TAG_RELEASE, wire.pack_bucket(*bucket, trained))

    def barrier(self, rank: int, epoch: int) -> None:
        self.conn.request(wire.TAG_EPOCH_BARRIER, wire.pack_barrier(rank, epoch))

    def close(self):
        self.conn.close()


class PartitionClient:
    def __init__(self, addrs: list[str]):
        self.conns = [Connection(a) for a in addrs]

    def _conn(self, etype: str, p: int) -> Connection:
        return self.conns[partition_shard(etype, p, len(self.conns))]

    def get(self, etype: str, p: int) -> tuple[np.ndarray, np.ndarray] | None:
        tag, payload = self._conn(etype, p).request(
            wire.TAG_PART_GET, wire.pack_part_key(etype, p)
        )
        if tag == wire.TAG_NONE_AVAILABLE:
            return None
        return storage.parse_container(payload)

    def put(self, etype: str, p: int, values: np.ndarray, acc: np.ndarray) -> None:
        blob = storage.container_bytes(values, acc)
        tag, _ = self._conn(etype, p).request(
            wire.TAG_PART_PUT, wire.pack_part_put(etype, p, blob)
        )
        if tag != wire.TAG_ACK:
            raise wire.ProtocolError("partition put rejected")

    def close(self):
        for c in self.conns:
            c.close()


class ParamClient:
    def __init__(self, addrs: list[str]):
        self.conns = [Connection(a) for a in addrs]

    def _conn(self, key: str) -> Connection:
        return self.conns[param_shard(key, len(self.conns))]

    def fetch(self, key: str) -> tuple[np.ndarray, np.ndarray] | None:
        tag, payload = self._conn(key).request(wire.TAG_PARAM_FETCH, wire.pack_param_fetch(key))
        if tag == wire.TAG_NONE_AVAILABLE:
            return None
        _, values, acc = wire.unpack_param_values(payload)
        return values, acc

    def init(self, key: str, values: np.ndarray) -> None:
        self._conn(key).request(
            wire.TAG_PARAM_PUSH_ACC, wire.pack_param_push(wire.PUSH_INIT, key, values)
        )

    def push_grad(self, key: str, grad: np.ndarray) -> None:
        tag, _ = self._conn(key).request(
            wire.TAG_PARAM_PUSH_ACC, wire.pack_param_push(wire.PUSH_GRAD, key, grad)
        )
        if tag != wire.TAG_ACK:
            raise wire.ProtocolError(f"gradient push for unknown key {key}")

    def close(self):
        for c in self.conns:
            c.close()


class SharedParams(ParamSink):
    """Local shared-parameter copies plus the background sync loop.

    The trainer's gradient hooks accumulate into pending buffers; the sync
    thread pushes them (server applies Adagrad) and adopts fetched values.
    Between syncs training reads stale local copies, which is the accepted
    staleness contract.
    """

    def __init__(
        self,
        client: ParamClient,
        relations: RelationParameterSet,
        entity_tables: dict[str, EmbeddingPartition],
        interval_s: float = 0.05,
        bandwidth_budget: float | None = None,
    ):
        self.client = client
        self.relations = relations
        self.entity_tables = entity_tables
        self.interval_s = interval_s
        self.bandwidth_budget = bandwidth_budget  # bytes/sec, None = unthrottled
        self.lock = threading.Lock()
        self.pending: dict[str, np.ndarray] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- ParamSink hooks (called from training workers)

    def relation_grad(self, rel_id: int, side: str, grad: np.ndarray) -> bool:
        key = f"rel:{rel_id}:{'rcp' if side == 'source' else 'fwd'}"
        with self.lock:
            buf = self.pending.get(key)
            if buf is None:
                self.pending[key] = np.array(grad, dtype=np.float32)
            else:
                buf += grad
        return True

    def entity_rows_grad(self, entity_type: str, row_ids: np.ndarray, grads: np.ndarray) -> bool:
        if entity_type not in self.entity_tables:
            return False  # partitioned type: trainer updates it locally
        key = f"ent:{entity_type}"
        with self.lock:
            buf = self.pending.get(key)
            if buf is None:
                buf = np.zeros_like(self.entity_tables[entity_type].values)
                self.pending[key] = buf
            np.add.at(buf, row_ids, grads)
        return True

    # -- lifecycle

    def all_keys(self) -> list[str]:
        return self.relations.shared_keys() + [f"ent:{t}" for t in self.entity_tables]

    def initialize(self) -> None:
        """Seed the servers (first rank wins; init is deterministic) and adopt."""
        for key in self.all_keys():
            got = self.client.fetch(key)
            if got is None:
                self.client.init(key, self._local_values(key))
                got = self.client.fetch(key)
            self._adopt(key, got[0])

    def _local_values(self, key: str) -> np.ndarray:
        if key.startswith("ent:"):
            return self.entity_tables[key[4:]].values
        return self.relations.key_arrays(key)[0]

    def _adopt(self, key: str, values: np.ndarray) -> None:
        if key.startswith("ent:"):
            table = self.entity_tables[key[4:]]
            table.values[:] = values.reshape(table.values.shape)
        else:
            self.relations.set_key(key, values)

    def sync_once(self) -> int:
        """One push+fetch round over all keys; returns bytes transferred."""
        with self.lock:
            todo = self.pending
            self.pending = {}
        sent = 0
        for key, grad in todo.items():
            self.client.push_grad(key, grad)
            sent += grad.nbytes
        for key in self.all_keys():
            got = self.client.fetch(key)
            if got is not None:
                self._adopt(key, got[0])
                sent += got[0].nbytes
        return sent

    def _loop(self):
        while not self._stop.is_set():
            sent = self.sync_once()
            delay = self.interval_s
            if self.bandwidth_budget:
                delay = max(delay, sent / self.bandwidth_budget)
            self._stop.wait(delay)

    def start(self):
        self._thread = threading.Thread(target=self._loop, name="param-sync", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join()
        self.sync_once()  # final push so no accumulated gradient is lost


# ---------------------------------------------------------------------------
# the distributed trainer loop


def distributed_train(
    config: Config,
    rank: int,
    cluster: ClusterSpec,
    num_epochs: int | None = None,
    num_workers: int | None = None,
    sync_interval_s: float = 0.05,
) -> TrainResult | None:
    """Train as one rank of a cluster; rank 0 writes the epoch checkpoints."""
    meta = ingest.load_meta(cluster.data_dir)
    if meta["config_hash"] != config.config_hash():
        raise ValueError("data dir was ingested with a different config")
    epochs = config.training.num_epochs if num_epochs is None else num_epochs
    counts = {t: list(map(int, c)) for t, c in meta["entity_counts"].items()}
    bucket_counts = {tuple(map(int, k.split(","))): v for k, v in meta["buckets"].items()}
    dim = config.training.dimension
    seed = config.training.seed

    lock = LockClient(cluster.lock_server)
    parts_client = PartitionClient(cluster.partition_servers)
    params_client = ParamClient(cluster.param_servers)

    relations = RelationParameterSet(config.schema, dim, config.training.reciprocal_relations)
    unpartitioned = {
        t: init_partition(t, 0, counts[t][0], dim, seed)
        for t, decl in config.schema.entity_types.items()
        if not decl.partitioned
    }
    shared = SharedParams(
        params_client, relations, unpartitioned, interval_s=sync_interval_s
    )
    shared.initialize()
    shared.start()

    resident: dict[tuple[str, int], EmbeddingPartition] = {}
    epoch_stats: list[EpochStats] = []
    holder_stats = HolderStats()

    def fetch_partition(etype: str, p: int) -> EmbeddingPartition:
        got = parts_client.get(etype, p)
        if got is None:
            # cold start: partition never stored; deterministic local init
            part = init_partition(etype, p, counts[etype][p], dim, seed)
        else:
            part = EmbeddingPartition(etype, p, got[0], got[1])
        holder_stats.loads += 1
        holder_stats.current_partitioned_rows += part.count
        holder_stats.peak_partitioned_rows = max(
            holder_stats.peak_partitioned_rows, holder_stats.current_partitioned_rows
        )
        return part

    def store_and_drop(keys: list[tuple[str, int]]) -> None:
        for key in keys:
            part = resident.pop(key)
            parts_client.put(part.entity_type, part.partition, part.values, part.acc)
            holder_stats.evictions += 1
            holder_stats.current_partitioned_rows -= part.count

    try:
        for epoch in range(1, epochs + 1):
            es = EpochStats(epoch=epoch)
            t0 = time.monotonic()
            held_bucket: tuple[int, int] | None = None
            while True:
                held_parts = set()
                if held_bucket is not None:
                    held_parts = {held_bucket[0], held_bucket[1]}
                bucket, complete = lock.acquire(rank, held_parts)
                if bucket is None:
                    if held_bucket is not None:
                        store_and_drop(list(resident))
                        lock.release(held_bucket, trained=True)
                        held_bucket = None
                        continue
                    if complete:
                        break
                    time.sleep(0.05)
                    continue

                needed = {
                    key
                    for key in needed_partitions(config, bucket)
                    if config.schema.entity_types[key[0]].partitioned
                }
                store_and_drop([k for k in resident if k not in needed])
                for key in sorted(needed):
                    if key not in resident:
                        resident[key] = fetch_partition(*key)
                if held_bucket is not None:
                    lock.release(held_bucket, trained=True)

                tables = dict(resident)
                for t, part in unpartitioned.items():
                    tables[(t, 0)] = part
                edges = ingest.read_bucket(
                    ingest.bucket_path(cluster.data_dir, *bucket),
                    expect_count=bucket_counts.get(bucket, 0),
                )
                bs = train_bucket(
                    config, tables, bucket, edges, relations, epoch,
                    sink=shared, num_workers=num_workers,
                )
                for part in resident.values():
                    part.dirty = True
                es.buckets.append(bs)
                es.edges += bs.edges
                es.loss_sum += bs.loss_sum
                logger.info(
                    kv_line(
                        "bucket_done", rank=rank, epoch=epoch,
                        bucket=f"{bucket[0]},{bucket[1]}", edges=bs.edges,
                        mean_loss=bs.mean_loss if bs.mean_loss is not None else "nan",
                        seconds=bs.seconds,
                    )
                )
                held_bucket = bucket

            es.seconds = time.monotonic() - t0
            es.loads = holder_stats.loads
            es.evictions = holder_stats.evictions
            epoch_stats.append(es)
            logger.info(
                kv_line("epoch_done", rank=rank, epoch=epoch, edges=es.edges, seconds=es.seconds)
            )
            if rank == 0:
                # all buckets are complete and other ranks are (or will be)
                # blocked at the barrier, so this snapshot is the epoch state
                _write_checkpoint_from_servers(
                    config, cluster, counts, parts_client, params_client, relations, epoch, es
                )
            lock.barrier(rank, epoch)
    finally:
        shared.stop()
        lock.close()
        parts_client.close()
        params_client.close()

    if rank == 0:
        return TrainResult(cluster.checkpoint_dir, epoch_stats, holder_stats)
    return TrainResult("", epoch_stats, holder_stats)


def _write_checkpoint_from_servers(
    config: Config,
    cluster: ClusterSpec,
    counts: dict[str, list[int]],
    parts_client: PartitionClient,
    params_client: ParamClient,
    relations: RelationParameterSet,
    epoch: int,
    es: EpochStats,
) -> None:
    ckpt = cluster.checkpoint_dir
    os.makedirs(ckpt, exist_ok=True)
    entity_files: dict[str, dict[str, str]] = {}
    dim = config.training.dimension
    seed = config.training.seed
    for etype, decl in config.schema.entity_types.items():
        for p in range(decl.num_partitions):
            if decl.partitioned:
                got = parts_client.get(etype, p)
                if got is None:  # bucket grid never touched it this epoch
                    part = init_partition(etype, p, counts[etype][p], dim, seed)
                    values, acc = part.values, part.acc
                else:
                    values, acc = got
            else:
                got = params_client.fetch(f"ent:{etype}")
                if got is None:
                    raise RuntimeError(f"shared entity table ent:{etype} missing at checkpoint")
                values, acc = got
            fn = storage.partition_filename(etype, p, epoch)
            storage.write_container(os.path.join(ckpt, fn), values, acc)
            entity_files.setdefault(etype, {})[str(p)] = fn

    # adopt the server's relation state, then pack it
    snapshot = RelationParameterSet(
        config.schema, dim, config.training.reciprocal_relations
    )
    for key in snapshot.shared_keys():
        got = params_client.fetch(key)
        if got is not None:
            values, acc = got
            v_arr, a_arr = snapshot.key_arrays(key)
            v_arr[:] = values.reshape(v_arr.shape)
            a_arr[:] = acc.reshape(a_arr.shape)
    rel_fn, rel_acc_fn = storage.relation_filenames(epoch)
    v, a = snapshot.pack()
    storage.write_container(os.path.join(ckpt, rel_fn), v)
    storage.write_container(os.path.join(ckpt, rel_acc_fn), a)
    manifest = storage.Manifest(
        epoch=epoch,
        config_hash=config.config_hash(),
        entity_files=entity_files,
        relation_file=rel_fn,
        relation_acc_file=rel_acc_fn,
        entity_counts=counts,
        stats={"epoch_seconds": es.seconds, "mean_loss": es.mean_loss},
    )
    storage.save_manifest(ckpt, manifest)
    storage.prune_old_versions(ckpt, epoch)
