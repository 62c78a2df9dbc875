"""Candidate cache, ranking paths and IR metrics."""

import numpy as np
import pytest

from polyscore.encoder import ModelConfig
from polyscore.errors import ContractError, StaleCacheError
from polyscore.model import Model, Scorer
from polyscore.retrieval import (
    CandidateCache,
    RankResult,
    build_cache,
    load_cache,
    mrr,
    rank_bi,
    rank_cross,
    rank_poly,
    recall_at_k,
    save_cache,
)
from polyscore.text import Vocabulary

from conftest import make_rng
from oracles import brute_force_rank


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary([f"w{i}" for i in range(28)])


@pytest.fixture(scope="module")
def world(vocab):
    cfg = ModelConfig(vocab_size=len(vocab))
    base = Model.init_pretrain(cfg, make_rng(17))
    bi = Scorer(base.derive("bi", make_rng(1)), vocab)
    poly = Scorer(base.derive("poly", make_rng(1), poly_variant="learnt", poly_m=4), vocab)
    cross = Scorer(base.derive("cross", make_rng(1)), vocab)
    return bi, poly, cross


def texts(rng, n, length=4):
    return [" ".join(f"w{int(i)}" for i in rng.integers(0, 28, size=length))
            for _ in range(n)]


class TestBuildCache:
    def test_single_candidate(self, world):
        bi, _, _ = world
        cache = build_cache(["w1 w2"], bi)
        assert cache.embeddings.shape == (1, 32)

    def test_duplicates_identical_rows(self, world):
        bi, _, _ = world
        cache = build_cache(["w1 w2", "w1 w2"], bi)
        assert np.array_equal(cache.embeddings[0], cache.embeddings[1])

    def test_row_equals_direct_encode(self, world):
        bi, _, _ = world
        cache = build_cache(["w3 w4 w5"], bi)
        direct = bi.candidate_vector("w3 w4 w5").data
        assert np.abs(cache.embeddings[0] - direct).max() < 1e-9

    def test_empty_rejected(self, world):
        with pytest.raises(ContractError):
            build_cache([], world[0])


class TestRankBi:
    def test_orthonormal_rows_pick_match(self, world):
        bi, _, _ = world
        emb = np.eye(8)[:, :32] if False else np.eye(8, 32)
        cache = CandidateCache(list(range(8)), [f"c{i}" for i in range(8)], emb, "unsaved")
        # craft a context vector equal to row 3 by monkeypatching is overkill;
        # score directly against the cache instead
        scores = cache.embeddings @ emb[3]
        order = np.argsort(-scores, kind="stable")
        assert order[0] == 3

    def test_full_permutation_sorted(self, world):
        bi, _, _ = world
        rng = make_rng(2)
        cache = build_cache(texts(rng, 6), bi)
        res = rank_bi(bi, ["w1 w2"], cache, k=6)
        scores = [s for _, s in res.ranking]
        assert scores == sorted(scores, reverse=True)
        assert sorted(cid for cid, _ in res.ranking) == list(range(6))

    def test_matches_brute_force_oracle(self, world):
        bi, _, _ = world
        rng = make_rng(3)
        cands = texts(rng, 50)
        cache = build_cache(cands, bi)
        res = rank_bi(bi, ["w9 w8 w7"], cache, k=50)
        oracle_scores = [bi.score_bi(["w9 w8 w7"], c) for c in cands]
        expected = brute_force_rank(list(range(50)), oracle_scores)
        assert [cid for cid, _ in res.ranking] == [cid for cid, _ in expected]
        got = dict(res.ranking)
        assert all(abs(got[cid] - s) < 1e-9 for cid, s in expected)

    def test_gold_rank(self, world):
        bi, _, _ = world
        rng = make_rng(4)
        cands = texts(rng, 10)
        cache = build_cache(cands, bi)
        res = rank_bi(bi, ["w1"], cache, k=3, gold_id=5)
        assert 1 <= res.rank_of_gold <= 10

    def test_deterministic_tie_order(self):
        cache = CandidateCache([0, 1, 2], ["a", "b", "a"],
                               np.zeros((3, 4)), "unsaved")
        scores = cache.embeddings @ np.ones(4)  # all ties
        from polyscore.retrieval import _result

        res = _result(cache.ids, scores, 3, None)
        assert [cid for cid, _ in res.ranking] == [0, 1, 2]  # ascending id on ties

    def test_stale_cache_hard_error(self, world):
        bi, _, _ = world
        cache = build_cache(["w1"], bi)
        cache.fingerprint = "deadbeef"
        with pytest.raises(StaleCacheError):
            rank_bi(bi, ["w1"], cache, k=1)

    def test_k_out_of_range(self, world):
        bi, _, _ = world
        cache = build_cache(["w1"], bi)
        with pytest.raises(ContractError):
            rank_bi(bi, ["w1"], cache, k=2)


class TestRankPoly:
    def test_matches_per_candidate_oracle(self, world):
        _, poly, _ = world
        rng = make_rng(5)
        cands = texts(rng, 30)
        cache = build_cache(cands, poly)
        res = rank_poly(poly, ["w2 w4 w6"], cache, k=30)
        oracle = [poly.score_poly(["w2 w4 w6"], c) for c in cands]
        expected = brute_force_rank(list(range(30)), oracle)
        assert [cid for cid, _ in res.ranking] == [cid for cid, _ in expected]
        got = dict(res.ranking)
        assert all(abs(got[cid] - s) < 1e-9 for cid, s in expected)

    def test_cache_equivalence_fresh_vs_loaded(self, world, tmp_path):
        _, poly, _ = world
        rng = make_rng(6)
        cands = texts(rng, 12)
        cache = build_cache(cands, poly)
        res_mem = rank_poly(poly, ["w3"], cache, k=12)
        path = tmp_path / "c.bin"
        save_cache(cache, path)
        res_file = rank_poly(poly, ["w3"], load_cache(path), k=12)
        assert [c for c, _ in res_mem.ranking] == [c for c, _ in res_file.ranking]
        for (_, a), (_, b) in zip(res_mem.ranking, res_file.ranking):
            assert abs(a - b) < 1e-4  # file rows are float32


class TestRankCross:
    def test_single_candidate(self, world):
        _, _, cross = world
        res = rank_cross(cross, ["w1"], ["w2"], k=1, gold_index=0)
        assert res.rank_of_gold == 1

    def test_deterministic(self, world):
        _, _, cross = world
        cands = texts(make_rng(7), 5)
        a = rank_cross(cross, ["w1 w2"], cands, k=5)
        b = rank_cross(cross, ["w1 w2"], cands, k=5)
        assert a.ranking == b.ranking

    def test_matches_cross_score_oracle(self, world):
        _, _, cross = world
        cands = texts(make_rng(8), 20)
        res = rank_cross(cross, ["w5 w6"], cands, k=20)
        oracle = [cross.score_cross(["w5 w6"], c).item() for c in cands]
        expected = brute_force_rank(list(range(20)), oracle)
        assert [cid for cid, _ in res.ranking] == [cid for cid, _ in expected]


class TestMetrics:
    def res(self, rank):
        return RankResult(ranking=[], rank_of_gold=rank)

    def test_all_rank_one(self):
        results = [self.res(1)] * 5
        assert recall_at_k(results, 1) == 1.0
        assert mrr(results) == 1.0

    def test_hand_arithmetic(self):
        results = [self.res(1), self.res(2), self.res(4)]
        assert mrr(results) == pytest.approx((1 + 0.5 + 0.25) / 3)
        assert recall_at_k(results, 1) == pytest.approx(1 / 3)
        assert recall_at_k(results, 2) == pytest.approx(2 / 3)
        assert recall_at_k(results, 4) == 1.0

    def test_uniform_baseline(self):
        rng = make_rng(9)
        results = [self.res(int(rng.integers(1, 21))) for _ in range(10000)]
        assert recall_at_k(results, 1) == pytest.approx(0.05, abs=0.01)

    def test_recall_monotone_and_bounds(self):
        rng = make_rng(10)
        results = [self.res(int(rng.integers(1, 21))) for _ in range(200)]
        values = [recall_at_k(results, k) for k in range(1, 21)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        m = mrr(results)
        assert recall_at_k(results, 1) <= m <= 1.0
        assert 0.0 < m <= 1.0

    def test_missing_gold_rejected(self):
        with pytest.raises(ContractError):
            mrr([RankResult(ranking=[], rank_of_gold=None)])


class TestCacheFile:
    def test_round_trip_byte_identical(self, world, tmp_path):
        bi, _, _ = world
        cache = build_cache(texts(make_rng(11), 7), bi)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_cache(cache, p1)
        save_cache(load_cache(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fields_survive(self, world, tmp_path):
        bi, _, _ = world
        cands = texts(make_rng(12), 4)
        cache = build_cache(cands, bi)
        path = tmp_path / "c.bin"
        save_cache(cache, path)
        back = load_cache(path)
        assert back.strings == cands
        assert back.ids == [0, 1, 2, 3]
        assert back.fingerprint == cache.fingerprint
        assert np.abs(back.embeddings - cache.embeddings).max() < 1e-6  # f32 quantization
