import numpy as np
import pytest

from grebe import ingest, synth
from grebe.config import from_dict
from grebe.evaluator import (
    EvalSettings,
    KnownEdges,
    evaluate,
    evaluate_edges,
    rank_edge,
    sample_candidates,
    training_frequencies,
)
from grebe.model import EmbeddingPartition, Model, RelationParameterSet
from grebe.scoring import RelationParameters, score_edge
from grebe.trainer import run_epochs
from grebe.model import load_checkpoint


class TestRankEdge:
    def test_tie_counts_against_model(self):
        # candidates score {0.7, 0.5, 0.2} against positive 0.5:
        # one greater + one tie -> rank 3
        r = rank_edge(0.5, np.array([0.7, 0.5, 0.2]), np.array([10, 11, 12]), true_id=99)
        assert r == 3

    def test_strictly_greatest_is_rank_one(self):
        r = rank_edge(0.9, np.array([0.7, 0.5]), np.array([1, 2]), true_id=99)
        assert r == 1

    def test_true_entity_excluded(self):
        # the true entity's own (higher) score must not count against it
        r = rank_edge(0.5, np.array([0.9, 0.1]), np.array([7, 8]), true_id=7)
        assert r == 1

    def test_filtering_removes_known_competitor(self):
        scores = np.array([0.9, 0.3])
        ids = np.array([3, 4])
        assert rank_edge(0.5, scores, ids, true_id=99) == 2
        assert rank_edge(0.5, scores, ids, true_id=99, known_ids=np.array([3])) == 1

    def test_empty_candidates_rank_one(self):
        assert rank_edge(0.1, np.array([]), np.array([], dtype=int), true_id=0) == 1

    def test_matches_brute_force_materialization(self):
        # oracle: score every corrupted edge explicitly, sort, count
        rng = np.random.default_rng(0)
        d = 6
        table = rng.normal(size=(12, d)).astype(np.float32)
        theta = rng.normal(size=d).astype(np.float32)
        rel = RelationParameters("diagonal", theta)
        for _ in range(50):
            s, t = rng.integers(12), rng.integers(12)
            cand = rng.integers(0, 12, size=8)
            pos = score_edge(table[s], rel, table[t], "dot")
            cand_scores = np.array([score_edge(table[s], rel, table[c], "dot") for c in cand])
            got = rank_edge(pos, cand_scores, cand, true_id=t)
            brute = 1 + sum(
                1
                for c in cand
                if c != t and score_edge(table[s], rel, table[c], "dot") >= pos
            )
            assert got == brute


class TestSampleCandidates:
    def test_uniform_split(self):
        rng = np.random.default_rng(1)
        got = sample_candidates(2, 40_000, "uniform", None, rng)
        frac = float(np.mean(got == 0))
        sigma = np.sqrt(0.25 / 40_000)
        assert abs(frac - 0.5) < 4 * sigma

    def test_prevalence_weighting(self):
        rng = np.random.default_rng(2)
        freqs = np.array([9.0, 1.0])
        got = sample_candidates(2, 40_000, "prevalence", freqs, rng)
        frac = float(np.mean(got == 0))
        sigma = np.sqrt(0.9 * 0.1 / 40_000)
        assert abs(frac - 0.9) < 4 * sigma

    def test_empty_sample(self):
        got = sample_candidates(5, 0, "uniform", None, np.random.default_rng(0))
        assert len(got) == 0


def _perfect_model(edges, n):
    """score(s, r, d) = 1 iff (s,d) is an edge: one-hot rows, adjacency operator.

    With a linear operator, score = <e_s, A e_d> = A[s, d], so setting the
    relation matrix to the adjacency matrix scores true edges 1, others 0.
    """
    cfg = from_dict(synth.synthetic_config_dict(dimension=n, operator="linear"))
    model = Model(config=cfg)
    model.partitions[("node", 0)] = EmbeddingPartition(
        "node", 0, np.eye(n, dtype=np.float32), np.zeros(n, np.float32)
    )
    rels = RelationParameterSet(cfg.schema, n, False)
    A = np.zeros((n, n), dtype=np.float32)
    for s, _, d in edges:
        A[s, d] = 1.0
    rels.lin[0][:] = A
    model.relations = rels
    return model


class TestEvaluateEdges:
    def test_perfect_model_filtered_mrr_one(self):
        # score = 1 iff edge exists; filtered mode removes the other true
        # edges from the candidates, so every rank is 1
        n = 8
        rng = np.random.default_rng(3)
        edges = []
        seen = set()
        while len(edges) < 12:
            s, d = int(rng.integers(n)), int(rng.integers(n))
            if (s, d) not in seen:
                seen.add((s, d))
                edges.append((s, 0, d))
        edges = np.array(edges, dtype=np.int64)
        model = _perfect_model(edges, n)
        known = KnownEdges(edges)
        report = evaluate_edges(
            edges, model, EvalSettings(mode="filtered", hits_at=(1, 10)), known=known
        )
        assert report.mrr == pytest.approx(1.0)
        assert report.hits(1) == pytest.approx(1.0)

    def test_random_model_mean_rank(self):
        # with i.i.d. random scores and all-candidates mode over n entities,
        # rank is uniform on 1..n so MR ~ (n+1)/2; check within 3 sigma
        n, m, d = 40, 400, 16
        rng = np.random.default_rng(4)
        cfg = from_dict(synth.synthetic_config_dict(dimension=d, operator="identity"))
        model = Model(config=cfg)
        model.partitions[("node", 0)] = EmbeddingPartition(
            "node", 0, rng.normal(size=(n, d)).astype(np.float32), np.zeros(n, np.float32)
        )
        model.relations = RelationParameterSet(cfg.schema, d, False)
        edges = np.column_stack(
            [rng.integers(0, n, m), np.zeros(m, dtype=np.int64), rng.integers(0, n, m)]
        )
        report = evaluate_edges(edges, model, EvalSettings(mode="raw"))
        want = (n + 1) / 2
        sigma = np.sqrt((n * n - 1) / 12 / (2 * m))  # var of uniform{1..n}, pooled
        assert abs(report.mr - want) < 3.5 * sigma

    def test_filtered_rank_never_worse_than_raw(self):
        n, m, d = 30, 200, 8
        rng = np.random.default_rng(5)
        cfg = from_dict(synth.synthetic_config_dict(dimension=d, operator="diagonal"))
        model = Model(config=cfg)
        model.partitions[("node", 0)] = EmbeddingPartition(
            "node", 0, rng.normal(size=(n, d)).astype(np.float32), np.zeros(n, np.float32)
        )
        model.relations = RelationParameterSet(cfg.schema, d, False)
        edges = np.column_stack(
            [rng.integers(0, n, m), np.zeros(m, dtype=np.int64), rng.integers(0, n, m)]
        )
        raw = evaluate_edges(edges, model, EvalSettings(mode="raw"))
        filt = evaluate_edges(
            edges, model, EvalSettings(mode="filtered"), known=KnownEdges(edges)
        )
        assert np.all(filt.src_ranks <= raw.src_ranks)
        assert np.all(filt.dst_ranks <= raw.dst_ranks)

    def test_batched_equals_per_edge_reference(self):
        # all-candidates ranks equal the explicit rank_edge loop
        n, m, d = 25, 60, 8
        rng = np.random.default_rng(6)
        cfg = from_dict(synth.synthetic_config_dict(
            n_relations=3, dimension=d, operator="translation"))
        model = Model(config=cfg)
        table = rng.normal(size=(n, d)).astype(np.float32)
        model.partitions[("node", 0)] = EmbeddingPartition("node", 0, table, np.zeros(n, np.float32))
        rels = RelationParameterSet(cfg.schema, d, False)
        rels.vec += rng.normal(size=rels.vec.shape).astype(np.float32) * 0.3
        model.relations = rels
        edges = np.column_stack(
            [rng.integers(0, n, m), rng.integers(0, 3, m), rng.integers(0, n, m)]
        )
        report = evaluate_edges(edges, model, EvalSettings(mode="raw"))
        for k in range(m):
            s, r, t = map(int, edges[k])
            rel = RelationParameters("translation", rels.vec[r])
            pos = score_edge(table[s], rel, table[t], "cosine")
            cand_scores = np.array(
                [score_edge(table[s], rel, table[c], "cosine") for c in range(n)]
            )
            assert report.dst_ranks[k] == rank_edge(pos, cand_scores, np.arange(n), t)
            # source side: candidates raw, dest transformed
            u = rels.vec[r]
            pos_s = score_edge(table[s], rel, table[t], "cosine")
            cand_s = np.array(
                [score_edge(table[c], rel, table[t], "cosine") for c in range(n)]
            )
            assert report.src_ranks[k] == rank_edge(pos_s, cand_s, np.arange(n), s)

    def test_aggregates_match_rank_lists(self):
        rng = np.random.default_rng(7)
        ranks = rng.integers(1, 50, size=30)
        src, dst = ranks[:15], ranks[15:]
        rep = type("R", (), {})
        from grebe.evaluator import RankReport

        rep = RankReport("raw", "all", 15, 0, src, dst, hits_at=(1, 10))
        pooled = np.concatenate([src, dst])
        assert rep.mrr == pytest.approx(float(np.mean(1.0 / pooled)))
        assert rep.mr == pytest.approx(float(np.mean(pooled)))
        assert rep.hits(10) == pytest.approx(float(np.mean(pooled <= 10)))

    def test_hits_nondecreasing_in_k(self):
        from grebe.evaluator import RankReport

        rng = np.random.default_rng(8)
        ranks = rng.integers(1, 100, size=40)
        rep = RankReport("raw", "all", 20, 0, ranks[:20], ranks[20:], hits_at=(1, 10, 50))
        assert rep.hits(1) <= rep.hits(10) <= rep.hits(50)


class TestFilteredHandCase:
    def test_filtering_improves_rank_two_to_one(self, tmp_path):
        # 4 nodes; model scores candidate x higher than the true d, but
        # (s, r, x) is a training edge: filtered mode removes it
        n, d = 4, 4
        cfg = from_dict(synth.synthetic_config_dict(dimension=d, operator="identity"))
        table = np.zeros((n, d), dtype=np.float32)
        table[0] = [0.3, 0, 0, 0]  # s (small norm: self-candidate scores low)
        table[1] = [10, 0, 0, 0]  # x: scores higher with s than the true dest
        table[2] = [2, 0, 0, 0]  # d: the test edge's true dest
        table[3] = [-1, 0, 0, 0]
        model = Model(config=cfg)
        model.partitions[("node", 0)] = EmbeddingPartition("node", 0, table, np.zeros(n, np.float32))
        model.relations = RelationParameterSet(cfg.schema, d, False)
        test_edge = np.array([[0, 0, 2]])
        train_edge = np.array([[0, 0, 1]])
        raw = evaluate_edges(test_edge, model, EvalSettings(mode="raw"))
        assert raw.dst_ranks[0] == 2
        filt = evaluate_edges(
            test_edge, model, EvalSettings(mode="filtered"),
            known=KnownEdges(np.concatenate([train_edge, test_edge])),
        )
        assert filt.dst_ranks[0] == 1


class TestEndToEnd:
    def test_trained_model_beats_random_and_is_deterministic(self, tmp_path):
        # full pipeline: ingest -> train -> evaluate; a trained model on a
        # clustered graph must far outrank a random model, and sampled
        # evaluation is reproducible given the seed
        cfg = from_dict(synth.synthetic_config_dict(
            dimension=16, operator="diagonal", batch_size=100, chunk_size=10,
            uniform_negatives_per_chunk=10, loss="margin", margin=0.1,
            learning_rate=0.1, num_epochs=8, seed=11,
        ))
        # 30 clusters of ~10: even a perfect cluster model ranks uniformly
        # inside one cluster, so the ceiling is mean(1/U{1..10}) ~ 0.29
        edges = synth.clustered_edges(300, 30, 6000, noise=0.02, seed=11)
        tsv = str(tmp_path / "edges.tsv")
        synth.write_edges_tsv(tsv, edges)
        data = str(tmp_path / "data")
        ingest.run_ingest(tsv, cfg, data, split=(0.9, 0.05, 0.05))
        ckpt = str(tmp_path / "ckpt")
        run_epochs(cfg, data, ckpt)
        model, _ = load_checkpoint(ckpt, cfg)

        settings = EvalSettings(mode="raw", hits_at=(1, 10), seed=3)
        rep = evaluate(str(tmp_path / "data/test.tsv"), model, data, settings)
        assert rep.num_edges > 100
        # random ranks over 300 entities would give MRR ~ 0.02
        assert rep.mrr > 0.15

        sampled = EvalSettings(mode="raw", candidates="sampled:100:prevalence", seed=5)
        r1 = evaluate(str(tmp_path / "data/test.tsv"), model, data, sampled)
        r2 = evaluate(str(tmp_path / "data/test.tsv"), model, data, sampled)
        np.testing.assert_array_equal(r1.ranks, r2.ranks)

        filt = EvalSettings(mode="filtered", hits_at=(1, 10), seed=3)
        repf = evaluate(
            str(tmp_path / "data/test.tsv"), model, data, filt,
            filter_paths=[str(tmp_path / f"data/{n}.tsv") for n in ("train", "valid", "test")],
        )
        assert repf.mrr >= rep.mrr

    def test_training_frequencies_match_bucket_contents(self, tmp_path):
        cfg = from_dict(synth.synthetic_config_dict(dimension=8, num_partitions=2))
        edges = synth.clustered_edges(50, 5, 500, seed=12)
        tsv = str(tmp_path / "edges.tsv")
        synth.write_edges_tsv(tsv, edges)
        data = str(tmp_path / "data")
        ingest.run_ingest(tsv, cfg, data)
        freqs = training_frequencies(data, cfg)["node"]
        assert int(freqs.sum()) == 2 * 500  # each edge contributes src + dst
