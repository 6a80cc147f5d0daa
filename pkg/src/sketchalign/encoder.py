"""Modality encoders: pre-norm self-attention stacks with a learnable global
token for rasters, and a small text transformer with an output projection.

Blocks follow the pre-norm residual form
    z <- z + MSA(LN(z));  z <- z + MLP(LN(z))
so zeroing the attention and MLP weights leaves the identity on
(global prepend + positions). The classification head of a standard ViT is
deliberately absent: downstream alignment consumes the token features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor


@dataclass
class TokenSequence:
    """Ordered token embeddings; when has_global is set, row 0 is the
    sequence-level aggregate."""

    tokens: Tensor  # (n, d)
    modality: str   # "sketch" | "image" | "text"
    has_global: bool = False

    def __post_init__(self):
        if self.tokens.data.ndim != 2:
            raise ShapeError(f"token sequences are 2-d, got {self.tokens.shape}")
        if self.has_global and self.tokens.shape[0] < 2:
            raise ShapeError("a sequence with a global slot needs at least 2 rows")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def global_index(self) -> int:
        return 0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


class AttentionParams:
    """Per-head q/k/v projections plus the concat output projection.

    ``tie_qk`` shares one projection for queries and keys (symmetric attention
    logits). The cross-modal layer uses this so that the projection applied to
    inference-time visual queries is the same one training exercised on visual
    keys; with distinct matrices the query map would only ever see text.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 std: float = 0.02, tie_qk: bool = False):
        if dim % heads != 0:
            raise ShapeError(f"head count {heads} must divide dim {dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.tie_qk = tie_qk
        self.wk = [Tensor(trunc_normal(rng, (dim, self.head_dim), std), requires_grad=True)
                   for _ in range(heads)]
        self.wq = self.wk if tie_qk else [
            Tensor(trunc_normal(rng, (dim, self.head_dim), std), requires_grad=True)
            for _ in range(heads)]
        self.wv = [Tensor(trunc_normal(rng, (dim, self.head_dim), std), requires_grad=True)
                   for _ in range(heads)]
        self.wo = Tensor(trunc_normal(rng, (dim, dim), std), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)

    def named_parameters(self, prefix: str):
        for h in range(self.heads):
            if not self.tie_qk:
                yield f"{prefix}.h{h}.wq", self.wq[h]
            yield f"{prefix}.h{h}.wk", self.wk[h]
            yield f"{prefix}.h{h}.wv", self.wv[h]
        yield f"{prefix}.wo", self.wo
        yield f"{prefix}.bo", self.bo


def multi_head_attention(query: Tensor, keys_values: Tensor, p: AttentionParams,
                         dropout_rate: float = 0.0, train: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Scaled dot-product attention; output length equals query length."""
    if query.shape[1] != p.dim or keys_values.shape[1] != p.dim:
        raise ShapeError(f"attention dim mismatch: query {query.shape}, "
                         f"kv {keys_values.shape}, params expect dim {p.dim}")
    inv = 1.0 / math.sqrt(p.head_dim)
    heads = []
    for h in range(p.heads):
        q = T.matmul(query, p.wq[h])
        k = T.matmul(keys_values, p.wk[h])
        v = T.matmul(keys_values, p.wv[h])
        att = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), inv))
        if dropout_rate > 0:
            att = T.dropout(att, dropout_rate, train, rng)
        heads.append(T.matmul(att, v))
    merged = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    return T.add_rows(T.matmul(merged, p.wo), p.bo)


class BlockParams:
    """One pre-norm transformer block: attention + MLP with their layer norms."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.attn = AttentionParams(dim, heads, rng)
        hidden = dim * mlp_ratio
        self.ln1_gain = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.mlp_w1 = Tensor(trunc_normal(rng, (dim, hidden)), requires_grad=True)
        self.mlp_b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.mlp_w2 = Tensor(trunc_normal(rng, (hidden, dim)), requires_grad=True)
        self.mlp_b2 = Tensor(np.zeros(dim), requires_grad=True)

    def named_parameters(self, prefix: str):
        yield from self.attn.named_parameters(f"{prefix}.attn")
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                     "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def _run_block(z: Tensor, blk: BlockParams, dropout_rate: float,
               train: bool, rng) -> Tensor:
    h = T.layer_norm(z, blk.ln1_gain, blk.ln1_bias)
    z = T.add(z, multi_head_attention(h, h, blk.attn, dropout_rate, train, rng))
    h = T.layer_norm(z, blk.ln2_gain, blk.ln2_bias)
    m = T.gelu(T.add_rows(T.matmul(h, blk.mlp_w1), blk.mlp_b1))
    if dropout_rate > 0:
        m = T.dropout(m, dropout_rate, train, rng)
    m = T.add_rows(T.matmul(m, blk.mlp_w2), blk.mlp_b2)
    return T.add(z, m)


def self_attention(seq: TokenSequence, p: AttentionParams,
                   train: bool = False, rng=None, dropout_rate: float = 0.0) -> TokenSequence:
    out = multi_head_attention(seq.tokens, seq.tokens, p, dropout_rate, train, rng)
    return TokenSequence(out, modality=seq.modality, has_global=seq.has_global)


class EncoderParams:
    """Stack of blocks plus the global token and learned positions for one modality."""

    def __init__(self, cfg: ModelConfig, n_tokens: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_tokens = n_tokens
        self.global_token = Tensor(trunc_normal(rng, (1, cfg.dim)), requires_grad=True)
        self.positions = Tensor(trunc_normal(rng, (n_tokens + 1, cfg.dim)), requires_grad=True)
        self.blocks = [BlockParams(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.layers)]

    def named_parameters(self, prefix: str):
        yield f"{prefix}.global_token", self.global_token
        yield f"{prefix}.positions", self.positions
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}.block{i}")


def encode_visual(x: TokenSequence, p: EncoderParams, train: bool = False,
                  rng: np.random.Generator | None = None) -> TokenSequence:
    """Prepend the global token, add positions, run the block stack."""
    if x.has_global:
        raise ShapeError("encode_visual input must not already carry a global slot")
    if x.length + 1 != p.positions.shape[0]:
        raise ShapeError(f"positional length mismatch: {x.length} tokens + global "
                         f"vs {p.positions.shape[0]} positions")
    z = T.add(T.concat_rows([p.global_token, x.tokens]), p.positions)
    for blk in p.blocks:
        z = _run_block(z, blk, p.cfg.dropout, train, rng)
    return TokenSequence(z, modality=x.modality, has_global=True)


class TextEncoderParams:
    """Token-id embeddings, positions, block stack, and the width-matching
    output projection. Row 0 of the output is a learned aggregate token."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, max_len: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = Tensor(trunc_normal(rng, (vocab_size, cfg.dim)), requires_grad=True)
        self.aggregate = Tensor(trunc_normal(rng, (1, cfg.dim)), requires_grad=True)
        self.positions = Tensor(trunc_normal(rng, (max_len + 1, cfg.dim)), requires_grad=True)
        self.blocks = [BlockParams(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.text_layers)]
        self.proj_w = Tensor(trunc_normal(rng, (cfg.dim, cfg.dim)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(cfg.dim), requires_grad=True)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.embedding", self.embedding
        yield f"{prefix}.aggregate", self.aggregate
        yield f"{prefix}.positions", self.positions
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"{prefix}.block{i}")
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b


def encode_text(ids: list[int], p: TextEncoderParams, train: bool = False,
                rng: np.random.Generator | None = None) -> TokenSequence:
    """Embed token ids, run the text blocks, and project every token to the
    shared embedding width."""
    if not ids:
        raise ValueError("encode_text needs at least one token id")
    if len(ids) > p.max_len:
        raise ShapeError(f"text length {len(ids)} exceeds max {p.max_len}")
    bad = [i for i in ids if not 0 <= i < p.vocab_size]
    if bad:
        raise IndexError(f"token id {bad[0]} out of range for vocabulary of {p.vocab_size}")
    content = T.take_rows(p.embedding, ids)
    z = T.concat_rows([p.aggregate, content])
    z = T.add(z, T.take_rows(p.positions, range(len(ids) + 1)))
    for blk in p.blocks:
        z = _run_block(z, blk, p.cfg.dropout, train, rng)
    out = T.add_rows(T.matmul(z, p.proj_w), p.proj_b)
    return TokenSequence(out, modality="text", has_global=True)
