import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchalign.metrics import (average_precision, chance_map, metrics_from_scores,
                                 oracle_average_precision, oracle_metrics,
                                 oracle_precision_at_k, precision_at_k, rank_gallery,
                                 sort_by_score)


class TestAveragePrecision:
    def test_hand_case(self):
        assert average_precision([1, 0, 1]) == pytest.approx((1 / 1 + 2 / 3) / 2)

    def test_all_relevant(self):
        assert average_precision([1, 1, 1, 1]) == 1.0

    def test_cutoff_excludes_only_hit(self):
        assert average_precision([0, 0, 1], cutoff=2) == 0.0

    def test_no_relevant_is_zero(self):
        assert average_precision([0, 0, 0]) == 0.0

    def test_oracle_agrees_on_hand_cases(self):
        for rel, cutoff in [([1, 0, 1], None), ([0, 0, 1], 2), ([1, 1, 0, 1], 3),
                            ([0, 1, 0, 1, 1], None), ([1], 1)]:
            assert average_precision(rel, cutoff) == oracle_average_precision(rel, cutoff)


class TestPrecisionAtK:
    def test_all_relevant_top_k(self):
        assert precision_at_k([1, 1, 1, 0], 3) == 1.0

    def test_half(self):
        assert precision_at_k([1, 0], 2) == 0.5

    def test_short_gallery_keeps_k_denominator(self):
        assert precision_at_k([0] * 50, 100) == 0.0
        assert precision_at_k([1] * 50, 100) == 0.5

    def test_k_validation(self):
        with pytest.raises(ValueError):
            precision_at_k([1], 0)


class TestRanking:
    def test_single_item_gallery(self, tiny_cfg, tiny_corpus, tiny_model):
        from sketchalign.data import load_raster
        man = tiny_corpus["manifest"]
        q = load_raster(man.instances("seen_test", "sketch")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        g = load_raster(man.instances("seen_test", "image")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        out = rank_gallery(q, [g], tiny_model)
        assert len(out.ranking) == 1
        assert out.ranking[0][0] == g.instance_id

    def test_tie_break_by_id_ascending(self):
        order = sort_by_score(["z", "a", "m"], [0.5, 0.5, 0.9])
        assert order == [2, 1, 0]  # m first (0.9), then a, z on the tie

    def test_duplicate_items_rank_adjacent(self, tiny_cfg, tiny_corpus, tiny_model):
        from dataclasses import replace
        from sketchalign.data import load_raster
        man = tiny_corpus["manifest"]
        q = load_raster(man.instances("seen_test", "sketch")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        g = load_raster(man.instances("seen_test", "image")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        g2 = replace(g, instance_id=g.instance_id + "_copy")
        others = [load_raster(e, tiny_cfg.data.input_size, tiny_cfg.data.channels,
                              manifest=man) for e in man.instances("seen_test", "image")[1:3]]
        out = rank_gallery(q, [g2, g] + others, tiny_model)
        ids = [gid for gid, _ in out.ranking]
        i, j = ids.index(g.instance_id), ids.index(g2.instance_id)
        assert abs(i - j) == 1 and i < j  # adjacent, original id sorts first

    def test_gallery_order_irrelevant(self, tiny_cfg, tiny_corpus, tiny_model):
        from sketchalign.data import load_raster
        man = tiny_corpus["manifest"]
        q = load_raster(man.instances("seen_test", "sketch")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        gallery = [load_raster(e, tiny_cfg.data.input_size, tiny_cfg.data.channels,
                               manifest=man) for e in man.instances("seen_test", "image")]
        a = rank_gallery(q, gallery, tiny_model)
        b = rank_gallery(q, list(reversed(gallery)), tiny_model)
        assert a.ranking == b.ranking

    def test_empty_gallery_rejected(self, tiny_model, tiny_cfg, tiny_corpus):
        from sketchalign.data import load_raster
        man = tiny_corpus["manifest"]
        q = load_raster(man.instances("seen_test", "sketch")[0],
                        tiny_cfg.data.input_size, tiny_cfg.data.channels, manifest=man)
        with pytest.raises(ValueError, match="empty gallery"):
            rank_gallery(q, [], tiny_model)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_instances_match_oracle_exactly(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        m = int(rng.integers(3, 60))
        scores = rng.uniform(0, 1, (n, m))
        if seed % 3 == 0:
            scores = np.round(scores, 1)  # force score ties
        lq = rng.integers(0, 4, n).tolist()
        lg = rng.integers(0, 4, m).tolist()
        got = metrics_from_scores(scores, lq, lg)
        want = oracle_metrics(scores, lq, lg)
        assert got.map_at == want.map_at
        assert got.prec_at == want.prec_at
        assert got.per_query_ap == want.per_query_ap

    def test_perfect_scorer_gets_map_one(self):
        lq = [0, 1, 2]
        lg = [0, 0, 1, 1, 2, 2]
        scores = np.array([[1.0 if a == b else 0.0 for b in lg] for a in lq])
        assert metrics_from_scores(scores, lq, lg).map_at["all"] == 1.0

    def test_constant_scorer_matches_oracle(self):
        lq = [0, 1]
        lg = [0, 1, 0, 1, 1]
        scores = np.full((2, 5), 0.5)
        got = metrics_from_scores(scores, lq, lg)
        want = oracle_metrics(scores, lq, lg)
        assert got.map_at == want.map_at

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_rank_invariance_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(0, 1, (3, 8))
        lq = rng.integers(0, 3, 3).tolist()
        lg = rng.integers(0, 3, 8).tolist()
        base = metrics_from_scores(scores, lq, lg)
        warped = metrics_from_scores(np.exp(4 * scores) + 7, lq, lg)
        assert base.map_at == warped.map_at
        assert base.prec_at == warped.prec_at

    def test_all_relevant_first_bounds_prefixes(self):
        rel = [1, 1, 1, 0, 0, 0]
        full = average_precision(rel)
        for cutoff in (2, 3, 4, 6):
            assert full >= average_precision(rel, cutoff) - 1e-12


class TestChance:
    def test_balanced_two_class_chance_near_half(self):
        lq = [0] * 10 + [1] * 10
        lg = [0] * 10 + [1] * 10
        c = chance_map(lq, lg, trials=300, seed=3)
        assert 0.45 < c < 0.62

    def test_oracle_precision_short_gallery(self):
        assert oracle_precision_at_k([1, 1], 100) == pytest.approx(0.02)


def test_metric_report_fields_within_unit_interval():
    rng = np.random.default_rng(5)
    scores = rng.uniform(0, 1, (4, 9))
    rep = metrics_from_scores(scores, [0, 1, 0, 1], rng.integers(0, 2, 9).tolist())
    for v in [rep.map_at["all"], rep.map_at["200"], *rep.prec_at.values(), *rep.per_query_ap]:
        assert 0.0 <= v <= 1.0
    assert rep.query_count == 4
