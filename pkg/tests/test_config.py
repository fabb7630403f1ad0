import json

import pytest

from grebe.config import (
    DEFAULTS,
    Config,
    ParseError,
    ValidationError,
    from_dict,
    load_config,
)


def minimal_dict(**training):
    return {
        "entities": {"thing": {"num_partitions": 1}},
        "relations": [
            {"name": "rel", "source_type": "thing", "dest_type": "thing", "operator": "identity"}
        ],
        "training": {"dimension": 10, **training},
    }


class TestLoadConfig:
    def test_minimal_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(minimal_dict()))
        cfg = load_config(str(p))
        assert len(cfg.schema.entity_types) == 1
        assert len(cfg.schema.relations) == 1
        assert cfg.training.dimension == 10

    def test_unknown_entity_type_rejected(self):
        d = minimal_dict()
        d["relations"][0]["dest_type"] = "nonexistent"
        with pytest.raises(ValidationError, match="not a declared entity type"):
            from_dict(d)

    def test_fb15k_shaped_config_accepted(self):
        # 1 entity type, 1345 relations, d=400, complex operator, softmax,
        # reciprocal relations
        d = {
            "entities": {"entity": {"num_partitions": 1}},
            "relations": [
                {
                    "name": f"r{i}",
                    "source_type": "entity",
                    "dest_type": "entity",
                    "operator": "complex_diagonal",
                }
                for i in range(1345)
            ],
            "training": {
                "dimension": 400,
                "loss": "softmax",
                "reciprocal_relations": True,
                "num_epochs": 50,
            },
        }
        cfg = from_dict(d)
        assert len(cfg.schema.relations) == 1345
        assert cfg.training.loss == "softmax"
        assert cfg.training.reciprocal_relations

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ParseError):
            load_config(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_config(str(tmp_path / "absent.json"))

    def test_odd_dimension_with_complex_rejected(self):
        d = minimal_dict()
        d["relations"][0]["operator"] = "complex_diagonal"
        d["training"]["dimension"] = 7
        with pytest.raises(ValidationError, match="even dimension"):
            from_dict(d)

    def test_partition_count_mismatch_rejected(self):
        d = minimal_dict()
        d["entities"] = {"a": {"num_partitions": 4}, "b": {"num_partitions": 8}}
        d["relations"][0]["source_type"] = "a"
        d["relations"][0]["dest_type"] = "b"
        with pytest.raises(ValidationError, match="share one partition count"):
            from_dict(d)

    def test_batch_must_be_multiple_of_chunk(self):
        with pytest.raises(ValidationError, match="multiple of chunk_size"):
            from_dict(minimal_dict(batch_size=1000, chunk_size=64))

    def test_defaults_applied(self):
        cfg = from_dict(minimal_dict())
        t = cfg.training
        assert t.batch_size == DEFAULTS["batch_size"] == 1000
        assert t.chunk_size == DEFAULTS["chunk_size"] == 50
        assert t.uniform_negatives_per_chunk == DEFAULTS["uniform_negatives_per_chunk"] == 50
        assert t.loss == "margin" and t.margin == pytest.approx(0.1)

    def test_default_similarity_per_operator(self):
        d = minimal_dict()
        d["relations"] = [
            {"name": "t", "source_type": "thing", "dest_type": "thing", "operator": "translation"},
            {"name": "d", "source_type": "thing", "dest_type": "thing", "operator": "diagonal"},
        ]
        cfg = from_dict(d)
        assert cfg.schema.relations[0].resolved_similarity() == "cosine"
        assert cfg.schema.relations[1].resolved_similarity() == "dot"

    def test_round_trip(self, tmp_path):
        d = minimal_dict(loss="softmax", batch_size=200, chunk_size=20, seed=99)
        d["entities"]["thing"]["num_partitions"] = 4
        cfg = from_dict(d)
        p = tmp_path / "out.json"
        cfg.save(str(p))
        cfg2 = load_config(str(p))
        assert cfg2.to_dict() == cfg.to_dict()
        assert cfg2.config_hash() == cfg.config_hash()

    def test_hash_ignores_ingest_filled_counts(self):
        cfg = from_dict(minimal_dict())
        h0 = cfg.config_hash()
        cfg.schema.entity_types["thing"].count = 1234
        assert cfg.config_hash() == h0


class TestModelTable:
    """operator/similarity pairs reproduce the standard model formulations."""

    MAPPING = {
        "RESCAL": ("linear", "dot"),
        "TransE": ("translation", "cosine"),
        "DistMult": ("diagonal", "dot"),
        "ComplEx": ("complex_diagonal", "dot"),  # dot + folded conjugation
    }

    @pytest.mark.parametrize("model", sorted(MAPPING))
    def test_pair_is_expressible(self, model):
        op, sim = self.MAPPING[model]
        d = minimal_dict()
        d["relations"][0]["operator"] = op
        d["relations"][0]["similarity"] = sim
        cfg = from_dict(d)
        rel = cfg.schema.relations[0]
        assert (rel.operator, rel.resolved_similarity()) == (op, sim)
