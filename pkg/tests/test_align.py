import numpy as np
import pytest

from sketchalign import tensor as T
from sketchalign.align import (CrossAlignedSequence, RelationNetParams,
                               combined_loss, cross_attend, matching_loss,
                               relation_score, triplet_loss, unit_sequence)
from sketchalign.config import LossWeights
from sketchalign.encoder import AttentionParams, TokenSequence
from sketchalign.tensor import ShapeError, Tensor

D = 16
W = LossWeights(lambda_tri=0.5, lambda_rn=8.0, margin=0.3)


def seq(arr, modality="text"):
    arr = np.asarray(arr, dtype=np.float64)
    return TokenSequence(Tensor(arr), modality, has_global=arr.shape[0] >= 2)


def aligned(arr, pair=("sketch", "image")):
    arr = np.asarray(arr, dtype=np.float64)
    t = Tensor(arr)
    return CrossAlignedSequence(t, T.take_rows(t, [0]), pair)


def attn_params(seed=0, heads=2):
    return AttentionParams(D, heads, np.random.default_rng(seed), std=0.2)


class TestCrossAttend:
    def test_single_key_returns_its_value_projection(self):
        rng = np.random.default_rng(1)
        p = attn_params()
        q = seq(rng.uniform(-1, 1, (5, D)))
        kv = seq(rng.uniform(-1, 1, (1, D)), modality="image")
        out = cross_attend(q, kv, p).tokens.data
        v = np.hstack([kv.tokens.data @ w.data for w in p.wv])
        expected = (v @ p.wo.data + p.bo.data)[0]
        # every query row collapses to the same projected value, up to one ulp
        # of BLAS accumulation-order noise
        for row in out[1:]:
            np.testing.assert_array_equal(row, out[0])
        np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-14)

    def test_duplicating_the_key_set_splits_mass_evenly(self):
        rng = np.random.default_rng(2)
        p = attn_params(3)
        q = seq(rng.uniform(-1, 1, (4, D)))
        kv = rng.uniform(-1, 1, (3, D))
        base = cross_attend(q, seq(kv, "image"), p).tokens.data
        dup = cross_attend(q, seq(np.vstack([kv, kv]), "image"), p).tokens.data
        np.testing.assert_allclose(dup, base, atol=1e-12)

    @pytest.mark.parametrize("qlen", [1, 5, 17])
    @pytest.mark.parametrize("klen", [1, 4, 65])
    def test_output_length_equals_query_length(self, qlen, klen):
        rng = np.random.default_rng(qlen * 100 + klen)
        p = attn_params(5)
        out = cross_attend(seq(rng.uniform(-1, 1, (qlen, D))),
                           seq(rng.uniform(-1, 1, (klen, D)), "image"), p)
        assert out.tokens.shape == (qlen, D)
        assert out.global_token.shape == (1, D)

    def test_dim_mismatch_rejected(self):
        p = attn_params()
        with pytest.raises(ShapeError, match="dim mismatch"):
            cross_attend(seq(np.zeros((3, D))), seq(np.zeros((3, D * 2)), "image"), p)

    def test_global_is_row_zero(self):
        rng = np.random.default_rng(8)
        p = attn_params(9)
        out = cross_attend(seq(rng.uniform(-1, 1, (4, D))),
                           seq(rng.uniform(-1, 1, (6, D)), "image"), p)
        np.testing.assert_array_equal(out.global_token.data[0], out.tokens.data[0])


class TestTripletLoss:
    def _fixed(self, ga, gp, gn):
        def mk(g):
            t = Tensor(np.asarray([g], dtype=np.float64))
            return CrossAlignedSequence(t, t, ("text", "image"))
        return [mk(ga)], [mk(gp)], [mk(gn)]

    def test_boundary_distance_gives_zero(self):
        g = np.zeros(D)
        gn = np.zeros(D)
        gn[0] = W.margin  # ||ga - gn|| == margin while ga == gp
        a, p, n = self._fixed(g, g, gn)
        assert triplet_loss(a, p, n, W).item() == pytest.approx(0.0, abs=1e-15)

    def test_equal_pos_neg_gives_margin(self):
        rng = np.random.default_rng(11)
        ga, gp = rng.uniform(-1, 1, D), rng.uniform(-1, 1, D)
        a, p, n = self._fixed(ga, gp, gp)
        assert triplet_loss(a, p, n, W).item() == pytest.approx(W.margin, abs=1e-15)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(12)
        gs = rng.uniform(-1, 1, (5, 3, D))
        anchors, positives, negatives = [], [], []
        expected = 0.0
        for ga, gp, gn in gs:
            a, p, n = self._fixed(ga, gp, gn)
            anchors += a
            positives += p
            negatives += n
            expected += max(np.linalg.norm(ga - gp) - np.linalg.norm(ga - gn) + W.margin, 0.0)
        expected /= 5
        got = triplet_loss(anchors, positives, negatives, W).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_and_zero_beyond_margin(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            ga = rng.uniform(-1, 1, D)
            gp = ga + rng.uniform(-0.01, 0.01, D)
            gn = ga + 10.0 * np.sign(rng.uniform(-1, 1, D))
            a, p, n = self._fixed(ga, gp, gn)
            val = triplet_loss(a, p, n, W).item()
            assert val == 0.0


class TestRelationScore:
    def _params(self, seed=0):
        return RelationNetParams(hidden=8, dropout=0.5, rng=np.random.default_rng(seed))

    def test_frozen_weights_identical_sequences(self):
        p = self._params()
        p.w1.data = np.ones_like(p.w1.data)
        p.b1.data = np.zeros_like(p.b1.data)
        p.w2.data = np.ones_like(p.w2.data)
        p.b2.data = np.zeros_like(p.b2.data)
        rng = np.random.default_rng(21)
        tokens = rng.uniform(0.1, 1.0, (4, D))
        a = aligned(tokens)
        b = aligned(tokens.copy())
        r = relation_score(a, b, p, train=False).item()
        # straight-line reference: cosine kernel, (max, mean) stats, all-ones MLP
        norm = tokens / np.linalg.norm(tokens, axis=1, keepdims=True)
        k = norm @ norm.T
        stats = np.stack([k.max(axis=1), k.mean(axis=1)], axis=1)
        hidden = np.maximum(stats @ np.ones((2, 8)), 0.0)
        expected = 1.0 / (1.0 + np.exp(-(hidden @ np.ones((8, 1))).mean()))
        assert r == pytest.approx(expected, rel=1e-12)
        assert np.allclose(np.diag(k), 1.0)

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(22)
        p = self._params(3)
        for _ in range(10):
            a = aligned(rng.uniform(-1, 1, (3, D)))
            b = aligned(rng.uniform(-1, 1, (5, D)))
            r = relation_score(a, b, p).item()
            assert 0.0 < r < 1.0
            r2 = relation_score(b, a, p).item()
            assert 0.0 < r2 < 1.0  # swapped direction stays in range too

    def test_invariant_to_positive_token_rescaling(self):
        rng = np.random.default_rng(23)
        p = self._params(4)
        ta = rng.uniform(-1, 1, (4, D))
        tb = rng.uniform(-1, 1, (6, D))
        base = relation_score(aligned(ta), aligned(tb), p).item()
        ta_scaled = ta.copy()
        ta_scaled[2] *= 37.5
        tb_scaled = tb.copy()
        tb_scaled[0] *= 0.001
        got = relation_score(aligned(ta_scaled), aligned(tb_scaled), p).item()
        assert got == pytest.approx(base, rel=1e-9)

    def test_zero_norm_token_counts_a_warning(self):
        rng = np.random.default_rng(24)
        p = self._params(5)
        ta = rng.uniform(0.1, 1, (3, D))
        ta[1] = 0.0
        before = p.zero_norm_warnings
        r = relation_score(aligned(ta), aligned(rng.uniform(0.1, 1, (4, D))), p).item()
        assert p.zero_norm_warnings == before + 1
        assert 0.0 < r < 1.0


class TestMatchingLoss:
    def test_perfect_scores_give_zero(self):
        ones = [[Tensor(1.0), Tensor(0.0)], [Tensor(0.0), Tensor(1.0)]]
        out = matching_loss(ones, [3, 4], [3, 4]).item()
        assert out == 0.0

    def test_single_half_score_matched(self):
        out = matching_loss([[Tensor(0.5)]], [1], [1]).item()
        assert out == pytest.approx(0.25, abs=1e-15)

    def test_matches_reference_on_random_batch(self):
        rng = np.random.default_rng(31)
        vals = rng.uniform(0, 1, (3, 4))
        lq = [0, 1, 2]
        lg = [2, 1, 0, 1]
        scores = [[Tensor(v) for v in row] for row in vals]
        expected = 0.0
        for i in range(3):
            for j in range(4):
                expected += (vals[i, j] - (1.0 if lq[i] == lg[j] else 0.0)) ** 2
        expected /= 12
        assert matching_loss(scores, lq, lg).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            matching_loss([[Tensor(0.5)]], [1, 2], [1])


class TestCombinedLoss:
    def test_zero_rn_weight(self):
        w = LossWeights(lambda_tri=0.7, lambda_rn=0.0, margin=0.3)
        rep = combined_loss(Tensor(0.4), Tensor(123.0), w)
        assert rep.l_total == pytest.approx(0.7 * 0.4, abs=1e-15)

    def test_all_zero(self):
        rep = combined_loss(Tensor(0.0), Tensor(0.0), W)
        assert rep.l_total == 0.0

    def test_paper_default_arithmetic(self):
        rep = combined_loss(Tensor(0.2), Tensor(0.01), LossWeights(0.5, 8.0, 0.3))
        assert rep.l_total == pytest.approx(0.18, abs=1e-15)

    def test_linearity_at_random_weight_pairs(self):
        rng = np.random.default_rng(41)
        for _ in range(5):
            lt, lr_ = rng.uniform(0, 2, 2)
            wt, wr = rng.uniform(0, 10, 2)
            rep = combined_loss(Tensor(lt), Tensor(lr_),
                                LossWeights(wt, wr, 0.3))
            assert abs(rep.l_total - (wt * lt + wr * lr_)) <= 1e-12
            assert rep.l_total == rep.total.item()


class TestScorePair:
    def test_deterministic_and_in_unit_interval(self, tiny_cfg, tiny_corpus, tiny_model):
        from sketchalign.data import load_raster
        man = tiny_corpus["manifest"]
        sk = man.instances("seen_test", "sketch")[0]
        im = man.instances("seen_test", "image")[0]
        load = lambda e: load_raster(e, tiny_cfg.data.input_size, tiny_cfg.data.channels,
                                     manifest=man)
        s = tiny_model.encode_raster(load(sk))
        i = tiny_model.encode_raster(load(im))
        r1 = tiny_model.score_pair(s, i)
        r2 = tiny_model.score_pair(s, i)
        assert r1 == r2
        assert 0.0 < r1 < 1.0

    def test_modality_check(self, tiny_model):
        rng = np.random.default_rng(0)
        a = TokenSequence(Tensor(rng.uniform(-1, 1, (3, 16))), "image", has_global=True)
        b = TokenSequence(Tensor(rng.uniform(-1, 1, (3, 16))), "image", has_global=True)
        with pytest.raises(ValueError, match="modalities"):
            tiny_model.score_pair(a, b)


def test_unit_sequence_rows_have_unit_norm():
    rng = np.random.default_rng(50)
    s = seq(rng.uniform(-5, 5, (4, D)))
    out = unit_sequence(s)
    np.testing.assert_allclose(np.linalg.norm(out.tokens.data, axis=1),
                               np.ones(4), atol=1e-12)
