import hashlib
import os

import numpy as np
import pytest

from grebe import ingest
from grebe.config import from_dict


def _config(p=2, partition_dest=True, extra_training=None):
    return from_dict(
        {
            "entities": {"node": {"num_partitions": p}}
            if partition_dest
            else {"node": {"num_partitions": p}, "tag": {"num_partitions": 1}},
            "relations": [
                {"name": "likes", "source_type": "node",
                 "dest_type": "node" if partition_dest else "tag", "operator": "identity"}
            ],
            "training": {"dimension": 4, **(extra_training or {})},
        }
    )


def _write_edges(path, edges):
    with open(path, "w", encoding="utf-8") as f:
        for s, r, d in edges:
            f.write(f"{s}\t{r}\t{d}\n")


def _stated_hash_partition(ext_id: str, p: int) -> int:
    # the documented rule: stable 64-bit blake2b of the id, mod P
    return int.from_bytes(hashlib.blake2b(ext_id.encode(), digest_size=8).digest(), "little") % p


class TestBuildDictionaries:
    def test_dense_bijective_local_indices(self, tmp_path):
        # brute-force check of density and bijectivity per partition
        edges = [("a", "likes", "b"), ("c", "likes", "d"), ("a", "likes", "d")]
        path = str(tmp_path / "e.tsv")
        _write_edges(path, edges)
        dicts = ingest.build_dictionaries([path], _config(p=2))
        d = dicts["node"]
        assert len(d) == 4
        per_part = {}
        for ext in "abcd":
            p, local = d.lookup(ext)
            assert p == _stated_hash_partition(ext, 2)
            per_part.setdefault(p, []).append(local)
        for p, locals_ in per_part.items():
            assert sorted(locals_) == list(range(len(locals_)))  # dense
            assert len(set(locals_)) == len(locals_)  # bijective
        assert sum(d.counts) == 4

    def test_single_partition_everything_in_zero(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [("x", "likes", "y")])
        d = ingest.build_dictionaries([path], _config(p=1))["node"]
        for ext in "xy":
            assert d.lookup(ext)[0] == 0

    def test_min_count_filters_rare_entities(self, tmp_path):
        # entity x appears 4 times, min_count=5: absent from dictionary
        edges = [("x", "likes", f"y{i}") for i in range(4)]
        edges += [("z", "likes", "w")] * 5  # z and w appear 5 times
        path = str(tmp_path / "e.tsv")
        _write_edges(path, edges)
        d = ingest.build_dictionaries([path], _config(p=1), min_count=5)["node"]
        assert "x" not in d.packed
        assert "z" in d.packed and "w" in d.packed

    def test_unknown_relation_rejected(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [("a", "unheard_of", "b")])
        with pytest.raises(ingest.IngestError, match="unknown relation"):
            ingest.build_dictionaries([path], _config())

    def test_empty_input_rejected(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        open(path, "w").close()
        with pytest.raises(ingest.IngestError, match="empty"):
            ingest.build_dictionaries([path], _config())

    def test_dictionary_file_round_trip(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [("a", "likes", "b"), ("c", "likes", "a")])
        d = ingest.build_dictionaries([path], _config(p=2))["node"]
        f = str(tmp_path / "node.dict")
        d.save(f)
        d2 = ingest.EntityDictionary.load(f, "node", 2)
        assert d2.packed == d.packed
        assert d2.counts == d.counts


class TestBucketize:
    def test_single_partition_single_bucket(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        edges = [(f"s{i}", "likes", f"d{i}") for i in range(10)]
        _write_edges(path, edges)
        cfg = _config(p=1)
        dicts = ingest.build_dictionaries([path], cfg)
        counts, dropped = ingest.bucketize(path, dicts, cfg, str(tmp_path))
        assert counts == {(0, 0): 10}
        assert dropped == 0

    def test_hand_assigned_placement(self, tmp_path):
        # compute the stated hash by hand and verify each edge lands in the
        # bucket named by its endpoints' partitions
        path = str(tmp_path / "e.tsv")
        edges = [(f"e{i}", "likes", f"e{(i * 7) % 20}") for i in range(20)]
        _write_edges(path, edges)
        cfg = _config(p=2)
        dicts = ingest.build_dictionaries([path], cfg)
        counts, _ = ingest.bucketize(path, dicts, cfg, str(tmp_path))
        want = {(i, j): 0 for i in range(2) for j in range(2)}
        for s, _, d in edges:
            want[(_stated_hash_partition(s, 2), _stated_hash_partition(d, 2))] += 1
        assert counts == want
        # and the records decode back to the right partitions
        for (i, j), n in counts.items():
            arr = ingest.read_bucket(str(tmp_path / "edges" / ingest.bucket_filename(i, j)), n)
            for row in arr:
                assert row[0] < dicts["node"].counts[i]
                assert row[2] < dicts["node"].counts[j]

    def test_unpartitioned_dest_gives_px1_grid(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        edges = [(f"u{i}", "likes", f"t{i % 3}") for i in range(12)]
        _write_edges(path, edges)
        cfg = _config(p=2, partition_dest=False)
        assert cfg.schema.grid_shape() == (2, 1)
        dicts = ingest.build_dictionaries([path], cfg)
        counts, _ = ingest.bucketize(path, dicts, cfg, str(tmp_path))
        assert set(counts) == {(0, 0), (1, 0)}
        assert sum(counts.values()) == 12

    def test_filtered_edges_dropped_with_count(self, tmp_path):
        full = str(tmp_path / "e.tsv")
        _write_edges(full, [("x", "likes", "y")] + [("a", "likes", "b")] * 5)
        cfg = _config(p=1)
        dicts = ingest.build_dictionaries([full], cfg, min_count=5)
        counts, dropped = ingest.bucketize(full, dicts, cfg, str(tmp_path))
        assert dropped == 1
        assert counts[(0, 0)] == 5

    def test_multiset_round_trip(self, tmp_path):
        # concatenating all buckets and mapping back through the dictionary
        # reproduces the retained input multiset
        path = str(tmp_path / "e.tsv")
        rng = np.random.default_rng(0)
        edges = [(f"n{rng.integers(30)}", "likes", f"n{rng.integers(30)}") for _ in range(200)]
        _write_edges(path, edges)
        cfg = _config(p=3)
        dicts = ingest.build_dictionaries([path], cfg)
        counts, _ = ingest.bucketize(path, dicts, cfg, str(tmp_path))
        rev = dicts["node"].by_partition()
        got = []
        for (i, j), n in counts.items():
            arr = ingest.read_bucket(str(tmp_path / "edges" / ingest.bucket_filename(i, j)), n)
            for s, r, d in arr:
                got.append((rev[i][s], "likes", rev[j][d]))
        assert sorted(got) == sorted(edges)

    def test_rerun_is_byte_identical(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        edges = [(f"n{i}", "likes", f"n{i + 1}") for i in range(50)]
        _write_edges(path, edges)
        cfg = _config(p=2)
        outs = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            ingest.run_ingest(path, cfg, str(out))
            blob = b""
            for name in sorted(os.listdir(out / "edges")):
                blob += (out / "edges" / name).read_bytes()
            for name in sorted(os.listdir(out / "entities")):
                blob += (out / "entities" / name).read_bytes()
            outs.append(blob)
        assert outs[0] == outs[1]

    def test_corrupt_bucket_file_detected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 13)  # not a multiple of the 12-byte record
        with pytest.raises(ingest.IngestError, match="whole number of records"):
            ingest.read_bucket(str(p))


class TestSplit:
    def test_all_train(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [(f"a{i}", "likes", "b") for i in range(100)])
        _, counts = ingest.train_valid_test_split(path, (1.0, 0.0, 0.0), 0, str(tmp_path / "o"))
        assert counts == [100, 0, 0]

    def test_binomial_bounds(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [(f"a{i}", "likes", f"b{i}") for i in range(1000)])
        _, counts = ingest.train_valid_test_split(
            path, (0.9, 0.05, 0.05), 7, str(tmp_path / "o")
        )
        sigma = np.sqrt(1000 * 0.05 * 0.95)
        for c in counts[1:]:
            assert abs(c - 50) <= 3 * sigma
        assert sum(counts) == 1000

    def test_deterministic_and_disjoint(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        _write_edges(path, [(f"a{i}", "likes", f"b{i}") for i in range(500)])
        paths1, _ = ingest.train_valid_test_split(path, (0.8, 0.1, 0.1), 3, str(tmp_path / "o1"))
        paths2, _ = ingest.train_valid_test_split(path, (0.8, 0.1, 0.1), 3, str(tmp_path / "o2"))
        lines = []
        for p1, p2 in zip(paths1, paths2):
            c1 = open(p1).read()
            assert c1 == open(p2).read()
            lines.extend(c1.splitlines())
        assert len(lines) == 500 and len(set(lines)) == 500

    def test_bad_fractions_rejected(self, tmp_path):
        with pytest.raises(ingest.IngestError, match="sum to 1"):
            ingest.train_valid_test_split("x", (0.5, 0.2, 0.2), 0, str(tmp_path))


class TestRunIngest:
    def test_meta_and_full_pipeline(self, tmp_path):
        path = str(tmp_path / "e.tsv")
        rng = np.random.default_rng(1)
        _write_edges(
            path, [(f"n{rng.integers(40)}", "likes", f"n{rng.integers(40)}") for _ in range(300)]
        )
        cfg = _config(p=2)
        out = str(tmp_path / "data")
        stats = ingest.run_ingest(path, cfg, out, split=(0.8, 0.1, 0.1))
        meta = ingest.load_meta(out)
        assert meta["config_hash"] == cfg.config_hash()
        assert stats.split_counts is not None and sum(stats.split_counts) == 300
        # only the train portion is bucketized
        assert stats.edges_total == stats.split_counts[0]
        dicts = ingest.load_dictionaries(out, cfg)
        assert sum(dicts["node"].counts) == meta["entity_counts"]["node"][0] + meta["entity_counts"]["node"][1]
