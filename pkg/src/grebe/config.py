"""Graph schema and training configuration.

A config is a single JSON file with three top-level sections::

    {
      "entities":  {"<type name>": {"num_partitions": 4}},
      "relations": [{"name": "follows", "source_type": "user",
                     "dest_type": "user", "operator": "diagonal",
                     "similarity": "dot"}],
      "training":  {"dimension": 100, "loss": "margin", ...}
    }

Key names are normative; defaults for omitted training keys are listed in
DEFAULTS below.  The loaded object is immutable in spirit: every consumer
treats it as read-only, so it is safe to share across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any

OPERATORS = ("identity", "translation", "diagonal", "complex_diagonal", "linear")
SIMILARITIES = ("dot", "cosine")
LOSSES = ("margin", "logistic", "softmax")

# Documented defaults for omitted training keys.  `similarity` defaults are
# per-relation: cosine for the translation operator, dot for everything else.
DEFAULTS = {
    "loss": "margin",
    "margin": 0.1,
    "batch_size": 1000,
    "chunk_size": 50,
    "uniform_negatives_per_chunk": 50,
    "learning_rate": 0.1,
    "num_epochs": 10,
    "num_workers": 1,
    "reciprocal_relations": False,
    "seed": 0,
    "bucket_passes_per_epoch": 1,
}


class ConfigError(ValueError):
    """Base class for config problems."""


class ParseError(ConfigError):
    """The file could not be read or is not valid JSON."""


class ValidationError(ConfigError):
    """The file parsed but violates a schema invariant."""


@dataclass
class EntityTypeDecl:
    name: str
    num_partitions: int = 1
    count: int | None = None  # filled by ingest

    @property
    def partitioned(self) -> bool:
        return self.num_partitions > 1


@dataclass
class RelationDecl:
    name: str
    source_type: str
    dest_type: str
    operator: str = "identity"
    similarity: str | None = None  # None -> per-operator default

    def resolved_similarity(self) -> str:
        if self.similarity is not None:
            return self.similarity
        return "cosine" if self.operator == "translation" else "dot"


@dataclass
class TrainConfig:
    dimension: int
    loss: str = DEFAULTS["loss"]
    margin: float = DEFAULTS["margin"]
    batch_size: int = DEFAULTS["batch_size"]
    chunk_size: int = DEFAULTS["chunk_size"]
    uniform_negatives_per_chunk: int = DEFAULTS["uniform_negatives_per_chunk"]
    learning_rate: float = DEFAULTS["learning_rate"]
    num_epochs: int = DEFAULTS["num_epochs"]
    num_workers: int = DEFAULTS["num_workers"]
    reciprocal_relations: bool = DEFAULTS["reciprocal_relations"]
    seed: int = DEFAULTS["seed"]
    bucket_passes_per_epoch: int = DEFAULTS["bucket_passes_per_epoch"]


@dataclass
class GraphSchema:
    entity_types: dict[str, EntityTypeDecl]
    relations: list[RelationDecl]

    def relation_id(self, name: str) -> int:
        for i, rel in enumerate(self.relations):
            if rel.name == name:
                return i
        raise KeyError(name)

    @property
    def num_partitions(self) -> int:
        """The shared partition count P of the partitioned entity types (1 if none)."""
        ps = {t.num_partitions for t in self.entity_types.values() if t.partitioned}
        return ps.pop() if ps else 1

    def grid_shape(self) -> tuple[int, int]:
        """Bucket grid (source rows, dest cols): PxP, Px1, 1xP or 1x1."""
        src = any(
            self.entity_types[r.source_type].partitioned for r in self.relations
        )
        dst = any(self.entity_types[r.dest_type].partitioned for r in self.relations)
        p = self.num_partitions
        return (p if src else 1, p if dst else 1)


@dataclass
class Config:
    schema: GraphSchema
    training: TrainConfig
    path: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        entities = {}
        for name, t in self.schema.entity_types.items():
            decl: dict[str, Any] = {"num_partitions": t.num_partitions}
            if t.count is not None:
                decl["count"] = t.count
            entities[name] = decl
        relations = []
        for r in self.schema.relations:
            relations.append(
                {
                    "name": r.name,
                    "source_type": r.source_type,
                    "dest_type": r.dest_type,
                    "operator": r.operator,
                    "similarity": r.resolved_similarity(),
                }
            )
        return {
            "entities": entities,
            "relations": relations,
            "training": asdict(self.training),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps() + "\n")

    def config_hash(self) -> str:
        """Stable hash of the validated config (checkpoint compatibility key).

        Entity counts are excluded: they are filled in by ingest, and the
        hash must not depend on whether that has happened yet.
        """
        d = self.to_dict()
        for decl in d["entities"].values():
            decl.pop("count", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def from_dict(data: dict[str, Any], path: str | None = None) -> Config:
    """Validate a parsed config dict and apply defaults."""
    if not isinstance(data, dict):
        raise ValidationError("config root must be an object")
    for key in ("entities", "relations", "training"):
        _require(key in data, f"missing config section: {key}")

    entity_types: dict[str, EntityTypeDecl] = {}
    for name, decl in data["entities"].items():
        decl = dict(decl)
        p = int(decl.pop("num_partitions", 1))
        count = decl.pop("count", None)
        _require(not decl, f"unknown entity keys for {name!r}: {sorted(decl)}")
        _require(p >= 1, f"entity type {name!r}: num_partitions must be >= 1")
        if count is not None:
            count = int(count)
            _require(count >= p, f"entity type {name!r}: count {count} < num_partitions {p}")
        entity_types[name] = EntityTypeDecl(name=name, num_partitions=p, count=count)
    _require(len(entity_types) > 0, "at least one entity type is required")

    shared_p = {t.num_partitions for t in entity_types.values() if t.num_partitions > 1}
    _require(
        len(shared_p) <= 1,
        f"all partitioned entity types must share one partition count, got {sorted(shared_p)}",
    )

    relations: list[RelationDecl] = []
    seen = set()
    for decl in data["relations"]:
        decl = dict(decl)
        rel = RelationDecl(
            name=str(decl.pop("name")),
            source_type=str(decl.pop("source_type")),
            dest_type=str(decl.pop("dest_type")),
            operator=str(decl.pop("operator", "identity")),
            similarity=decl.pop("similarity", None),
        )
        _require(not decl, f"unknown relation keys for {rel.name!r}: {sorted(decl)}")
        _require(rel.name not in seen, f"duplicate relation name {rel.name!r}")
        seen.add(rel.name)
        for side, tname in (("source_type", rel.source_type), ("dest_type", rel.dest_type)):
            _require(
                tname in entity_types,
                f"relation {rel.name!r}: {side} {tname!r} is not a declared entity type",
            )
        _require(rel.operator in OPERATORS, f"relation {rel.name!r}: unknown operator {rel.operator!r}")
        if rel.similarity is not None:
            _require(
                rel.similarity in SIMILARITIES,
                f"relation {rel.name!r}: unknown similarity {rel.similarity!r}",
            )
        relations.append(rel)
    _require(len(relations) > 0, "at least one relation is required")

    tdata = dict(data["training"])
    _require("dimension" in tdata, "training.dimension is required")
    merged = {**DEFAULTS, **tdata}
    unknown = set(merged) - set(DEFAULTS) - {"dimension"}
    _require(not unknown, f"unknown training keys: {sorted(unknown)}")
    training = TrainConfig(
        dimension=int(merged["dimension"]),
        loss=str(merged["loss"]),
        margin=float(merged["margin"]),
        batch_size=int(merged["batch_size"]),
        chunk_size=int(merged["chunk_size"]),
        uniform_negatives_per_chunk=int(merged["uniform_negatives_per_chunk"]),
        learning_rate=float(merged["learning_rate"]),
        num_epochs=int(merged["num_epochs"]),
        num_workers=int(merged["num_workers"]),
        reciprocal_relations=bool(merged["reciprocal_relations"]),
        seed=int(merged["seed"]),
        bucket_passes_per_epoch=int(merged["bucket_passes_per_epoch"]),
    )

    _require(training.dimension >= 1, "dimension must be positive")
    _require(training.loss in LOSSES, f"unknown loss {training.loss!r}")
    _require(training.margin >= 0.0, "margin must be >= 0")
    _require(training.chunk_size >= 1, "chunk_size must be positive")
    _require(
        training.batch_size >= 1 and training.batch_size % training.chunk_size == 0,
        "batch_size must be a positive multiple of chunk_size",
    )
    _require(training.uniform_negatives_per_chunk >= 0, "uniform_negatives_per_chunk must be >= 0")
    _require(training.learning_rate > 0.0, "learning_rate must be > 0")
    _require(training.num_epochs >= 0, "num_epochs must be >= 0")
    _require(training.num_workers >= 1, "num_workers must be >= 1")
    _require(training.bucket_passes_per_epoch >= 1, "bucket_passes_per_epoch must be >= 1")
    _require(-(2**63) <= training.seed < 2**64, "seed must fit in 64 bits")
    for rel in relations:
        if rel.operator == "complex_diagonal":
            _require(
                training.dimension % 2 == 0,
                f"relation {rel.name!r}: complex_diagonal requires an even dimension",
            )

    return Config(schema=GraphSchema(entity_types, relations), training=training, path=path)


def load_config(path: str) -> Config:
    """Load, parse and validate a config file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed config {path}: {e}") from e
    return from_dict(data, path=path)
