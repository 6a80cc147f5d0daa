import numpy as np
import pytest

from sketchalign import tensor as T
from sketchalign.config import ModelConfig
from sketchalign.encoder import (AttentionParams, EncoderParams, TextEncoderParams,
                                 TokenSequence, encode_text, encode_visual,
                                 self_attention)
from sketchalign.tensor import ShapeError, Tensor

CFG = ModelConfig(dim=16, heads=2, layers=2, text_layers=1, dropout=0.0)


def seq(arr, modality="sketch", has_global=False):
    return TokenSequence(Tensor(np.asarray(arr, dtype=np.float64)), modality,
                         has_global=has_global)


def rand_seq(rng, n, d=16):
    return seq(rng.uniform(-1, 1, (n, d)))


class TestEncodeVisual:
    def test_empty_stack_is_prepend_plus_positions(self):
        cfg = ModelConfig(dim=16, heads=2, layers=0, dropout=0.0)
        rng = np.random.default_rng(0)
        p = EncoderParams(cfg, n_tokens=5, rng=rng)
        x = rand_seq(np.random.default_rng(1), 5)
        out = encode_visual(x, p)
        expected = np.vstack([p.global_token.data, x.tokens.data]) + p.positions.data
        np.testing.assert_array_equal(out.tokens.data, expected)
        assert out.has_global and out.length == 6

    def test_zero_weights_keep_residual_identity(self):
        rng = np.random.default_rng(2)
        p = EncoderParams(CFG, n_tokens=4, rng=rng)
        for blk in p.blocks:
            for _, t in blk.named_parameters("b"):
                if "ln" not in _.split(".")[-1][:2]:
                    t.data = np.zeros_like(t.data)
        x = rand_seq(np.random.default_rng(3), 4)
        out = encode_visual(x, p)
        expected = np.vstack([p.global_token.data, x.tokens.data]) + p.positions.data
        np.testing.assert_allclose(out.tokens.data, expected, atol=1e-12)

    def test_positional_length_mismatch_rejected(self):
        p = EncoderParams(CFG, n_tokens=4, rng=np.random.default_rng(0))
        with pytest.raises(ShapeError, match="positional"):
            encode_visual(rand_seq(np.random.default_rng(1), 7), p)

    def test_input_with_global_rejected(self):
        p = EncoderParams(CFG, n_tokens=4, rng=np.random.default_rng(0))
        x = rand_seq(np.random.default_rng(1), 4)
        x.has_global = True
        with pytest.raises(ShapeError):
            encode_visual(x, p)

    def test_permutation_equivariance_with_permuted_positions(self):
        rng = np.random.default_rng(4)
        p = EncoderParams(CFG, n_tokens=6, rng=rng)
        x = rand_seq(np.random.default_rng(5), 6)
        base = encode_visual(x, p).tokens.data

        perm = np.random.default_rng(6).permutation(6)
        x_p = seq(x.tokens.data[perm])
        pos = p.positions.data.copy()
        p.positions.data = np.vstack([pos[0:1], pos[1:][perm]])
        permuted = encode_visual(x_p, p).tokens.data
        np.testing.assert_allclose(permuted[0], base[0], atol=1e-10)
        np.testing.assert_allclose(permuted[1:], base[1:][perm], atol=1e-10)

    def test_global_output_depends_on_every_token(self):
        rng = np.random.default_rng(7)
        p = EncoderParams(CFG, n_tokens=5, rng=rng)
        x = np.random.default_rng(8).uniform(-1, 1, (5, 16))
        base = encode_visual(seq(x), p).tokens.data[0]
        for i in range(5):
            poked = x.copy()
            # single-coordinate poke: a whole-vector constant shift would sit in
            # LayerNorm's null direction and never reach the attention
            poked[i, 3] += 0.31
            out = encode_visual(seq(poked), p).tokens.data[0]
            assert not np.allclose(out, base, atol=1e-9), f"token {i} invisible to global"

    def test_outputs_finite_for_wide_inputs(self):
        rng = np.random.default_rng(9)
        p = EncoderParams(CFG, n_tokens=4, rng=rng)
        x = seq(np.random.default_rng(10).uniform(-10, 10, (4, 16)))
        assert np.isfinite(encode_visual(x, p).tokens.data).all()


class TestSelfAttention:
    def test_single_token_equals_projected_value(self):
        rng = np.random.default_rng(11)
        p = AttentionParams(16, 2, rng)
        x = np.random.default_rng(12).uniform(-1, 1, (1, 16))
        out = self_attention(seq(x), p).tokens.data
        v = np.hstack([x @ w.data for w in p.wv])
        expected = v @ p.wo.data + p.bo.data
        np.testing.assert_array_equal(out, expected)

    def test_identical_tokens_get_identical_outputs(self):
        rng = np.random.default_rng(13)
        p = AttentionParams(16, 4, rng)
        row = np.random.default_rng(14).uniform(-1, 1, 16)
        out = self_attention(seq(np.tile(row, (3, 1))), p).tokens.data
        np.testing.assert_allclose(out[1], out[0], atol=1e-12)
        np.testing.assert_allclose(out[2], out[0], atol=1e-12)

    def test_head_count_must_divide_dim(self):
        with pytest.raises(ShapeError, match="divide"):
            AttentionParams(16, 3, np.random.default_rng(0))


class TestEncodeText:
    def _params(self, vocab=11, max_len=8):
        return TextEncoderParams(CFG, vocab, max_len, np.random.default_rng(20))

    def test_single_token_shape_contract(self):
        p = self._params()
        out = encode_text([5], p)
        assert out.tokens.shape == (2, 16)  # aggregate + one content token
        assert out.modality == "text" and out.has_global

    def test_different_ids_give_different_outputs(self):
        p = self._params()
        a = encode_text([1, 4, 9], p).tokens.data
        b = encode_text([1, 5, 9], p).tokens.data
        assert not np.allclose(a, b)

    def test_zero_projection_gives_zero_tokens(self):
        p = self._params()
        p.proj_w.data = np.zeros_like(p.proj_w.data)
        p.proj_b.data = np.zeros_like(p.proj_b.data)
        out = encode_text([3, 2], p)
        np.testing.assert_array_equal(out.tokens.data, np.zeros((3, 16)))

    def test_id_out_of_range(self):
        p = self._params(vocab=6)
        with pytest.raises(IndexError, match="out of range"):
            encode_text([2, 6], p)

    def test_empty_ids_rejected(self):
        with pytest.raises(ValueError):
            encode_text([], self._params())

    def test_too_long_rejected(self):
        p = self._params(max_len=4)
        with pytest.raises(ShapeError, match="exceeds"):
            encode_text([1, 2, 3, 4, 5], p)
