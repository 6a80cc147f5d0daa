"""Full retrieval model: two visual towers, a text tower, shared cross-attention,
and the relation scorer, with a flat named-parameter registry for the
optimizer and checkpoints.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .align import RelationNetParams
from .config import RunConfig
from .data import RasterInstance
from .encoder import (AttentionParams, EncoderParams, TextEncoderParams,
                      TokenSequence, encode_text, encode_visual)
from .tokenizer import TokenizerParams, tokenize_raster

_CROSS_ROLES = ("text:sketch", "text:image", "sketch:image", "image:sketch")


class RetrievalModel:
    """Owns every trainable tensor; construction is deterministic in the seed."""

    def __init__(self, cfg: RunConfig, vocab_size: int, init_seed: int = 0):
        rng = np.random.default_rng([init_seed, 815])
        m, d = cfg.model, cfg.data
        self.cfg = cfg
        self.vocab_size = vocab_size
        n_tokens = (d.input_size // d.patch) ** 2

        self.sketch_tokenizer = TokenizerParams(d, m.dim, rng)
        self.image_tokenizer = TokenizerParams(d, m.dim, rng)
        self.sketch_encoder = EncoderParams(m, n_tokens, rng)
        self.image_encoder = EncoderParams(m, n_tokens, rng)
        self.text_encoder = TextEncoderParams(m, vocab_size, cfg.text.max_text_len, rng)

        if m.share_cross_weights:
            shared = AttentionParams(m.dim, m.cross_heads, rng,
                                     std=m.cross_init_std, tie_qk=m.cross_tie_qk)
            self.cross = {role: shared for role in _CROSS_ROLES}
        else:
            self.cross = {role: AttentionParams(m.dim, m.cross_heads, rng,
                                                std=m.cross_init_std,
                                                tie_qk=m.cross_tie_qk)
                          for role in _CROSS_ROLES}
        self.relation = RelationNetParams(m.rn_hidden, m.rn_dropout, rng)

        self.params = dict(self._named_parameters())

    def _named_parameters(self) -> Iterator:
        yield from self.sketch_tokenizer.named_parameters("sketch_tok")
        yield from self.image_tokenizer.named_parameters("image_tok")
        yield from self.sketch_encoder.named_parameters("sketch_enc")
        yield from self.image_encoder.named_parameters("image_enc")
        yield from self.text_encoder.named_parameters("text_enc")
        if self.cfg.model.share_cross_weights:
            yield from self.cross["text:sketch"].named_parameters("cross")
        else:
            for role in _CROSS_ROLES:
                tag = role.replace(":", "_to_")
                yield from self.cross[role].named_parameters(f"cross.{tag}")
        yield from self.relation.named_parameters("relation")

    def cross_params(self, query_modality: str, kv_modality: str) -> AttentionParams:
        return self.cross[f"{query_modality}:{kv_modality}"]

    # -- forward helpers ------------------------------------------------------

    def encode_raster(self, x: RasterInstance, train: bool = False,
                      rng: np.random.Generator | None = None) -> TokenSequence:
        if x.modality == "sketch":
            tok, enc = self.sketch_tokenizer, self.sketch_encoder
        elif x.modality == "image":
            tok, enc = self.image_tokenizer, self.image_encoder
        else:
            raise ValueError(f"unknown modality {x.modality!r}")
        return encode_visual(tokenize_raster(x, tok), enc, train=train, rng=rng)

    def encode_text_ids(self, ids: list[int], train: bool = False,
                        rng: np.random.Generator | None = None) -> TokenSequence:
        return encode_text(ids, self.text_encoder, train=train, rng=rng)

    def score_pair(self, sketch: TokenSequence, image: TokenSequence) -> float:
        from .align import score_pair
        return score_pair(sketch, image, self)

    def parameter_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()[:16]
