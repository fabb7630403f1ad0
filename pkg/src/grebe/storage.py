"""Binary embedding containers and checkpoint directories.

Container layout (bit-exact, little-endian):

    magic   4 bytes  b"GFE1"
    version u32      1
    dim     u32      columns per row
    rows    u64      row count
    values  rows*dim f32, row-major
    acc     rows     f32  (per-row Adagrad accumulator)

Embedding partitions store their row-Adagrad state in the trailing column.
Relation parameters need elementwise Adagrad state, which does not fit the
per-row scalar slot, so they are checkpointed as two containers of
identical shape: one holding the values and one holding the accumulators
(both with a zero trailing column).

A checkpoint directory holds one container per (entity type, partition),
the relation containers, and a JSON manifest naming them all.  Files are
versioned by epoch: partial writes from a crashed epoch are invisible
because the manifest still references the previous epoch's files.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"GFE1"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class StorageError(RuntimeError):
    pass


def container_bytes(values: np.ndarray, acc: np.ndarray | None = None) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise StorageError(f"container values must be 2-d, got {values.shape}")
    rows, dim = values.shape
    if acc is None:
        acc = np.zeros(rows, dtype="<f4")
    acc = np.ascontiguousarray(acc, dtype="<f4")
    if acc.shape != (rows,):
        raise StorageError(f"accumulator shape {acc.shape} does not match {rows} rows")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, dim, rows))
    buf.write(values.tobytes())
    buf.write(acc.tobytes())
    return buf.getvalue()


def parse_container(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise StorageError("container truncated: missing header")
    magic, version, dim, rows = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise StorageError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StorageError(f"unsupported container version {version}")
    need = _HEADER.size + 4 * rows * dim + 4 * rows
    if len(blob) != need:
        raise StorageError(f"container size {len(blob)} != expected {need}")
    values = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=_HEADER.size)
    acc = np.frombuffer(blob, dtype="<f4", count=rows, offset=_HEADER.size + 4 * rows * dim)
    return values.reshape(rows, dim).copy(), acc.copy()


def write_container(path: str, values: np.ndarray, acc: np.ndarray | None = None) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(container_bytes(values, acc))
    os.replace(tmp, path)


def read_container(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        return parse_container(f.read())


# ---------------------------------------------------------------------------
# checkpoint directory


MANIFEST = "manifest.json"


@dataclass
class Manifest:
    epoch: int
    config_hash: str
    entity_files: dict[str, dict[str, str]]  # type -> {partition (as str) -> filename}
    relation_file: str
    relation_acc_file: str
    entity_counts: dict[str, list[int]]
    stats: dict | None = None

    def to_dict(self) -> dict:
        return {
            "format": "grebe-checkpoint",
            "version": 1,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "entity_files": self.entity_files,
            "relation_file": self.relation_file,
            "relation_acc_file": self.relation_acc_file,
            "entity_counts": self.entity_counts,
            "stats": self.stats or {},
        }


def partition_filename(entity_type: str, partition: int, epoch: int) -> str:
    return f"{entity_type}.p{partition}.v{epoch}.bin"


def relation_filenames(epoch: int) -> tuple[str, str]:
    return f"relations.v{epoch}.bin", f"relations_acc.v{epoch}.bin"


def save_manifest(ckpt_dir: str, manifest: Manifest) -> None:
    for t, parts in manifest.entity_files.items():
        for p, fn in parts.items():
            if not os.path.exists(os.path.join(ckpt_dir, fn)):
                raise StorageError(f"manifest references missing file {fn}")
    for fn in (manifest.relation_file, manifest.relation_acc_file):
        if not os.path.exists(os.path.join(ckpt_dir, fn)):
            raise StorageError(f"manifest references missing file {fn}")
    tmp = os.path.join(ckpt_dir, MANIFEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(ckpt_dir, MANIFEST))


def load_manifest(ckpt_dir: str, expect_config_hash: str | None = None) -> Manifest:
    path = os.path.join(ckpt_dir, MANIFEST)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise StorageError(f"no checkpoint manifest at {path}: {e}") from e
    if data.get("format") != "grebe-checkpoint":
        raise StorageError(f"{path} is not a checkpoint manifest")
    m = Manifest(
        epoch=int(data["epoch"]),
        config_hash=str(data["config_hash"]),
        entity_files={t: dict(parts) for t, parts in data["entity_files"].items()},
        relation_file=str(data["relation_file"]),
        relation_acc_file=str(data["relation_acc_file"]),
        entity_counts={t: list(map(int, c)) for t, c in data["entity_counts"].items()},
        stats=data.get("stats") or {},
    )
    if expect_config_hash is not None and m.config_hash != expect_config_hash:
        raise StorageError(
            f"checkpoint config hash {m.config_hash} does not match current config "
            f"{expect_config_hash}; refusing to load"
        )
    return m


def prune_old_versions(ckpt_dir: str, keep_epoch: int) -> None:
    """Delete container files from epochs other than `keep_epoch`."""
    for name in os.listdir(ckpt_dir):
        if not name.endswith(".bin"):
            continue
        stem = name[: -len(".bin")]
        if ".v" not in stem:
            continue
        try:
            epoch = int(stem.rsplit(".v", 1)[1])
        except ValueError:
            continue
        if epoch != keep_epoch:
            os.unlink(os.path.join(ckpt_dir, name))
