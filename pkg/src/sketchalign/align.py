"""Cross-modal alignment: cross-attention, global triplet loss, relation-net
local matching, and the text-free pair scorer used at retrieval time.

During training the text sequence queries the sketch and image token
sequences, so both re-expressions share the text's length and the all-pairs
cosine kernel between them is well-formed. At inference the same attention
weights are applied between the two visual sequences directly; no text is
involved anywhere on that path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights
from .encoder import AttentionParams, TokenSequence, multi_head_attention, trunc_normal
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class CrossAlignedSequence:
    """Tokens re-expressed through cross-attention; ``global_token`` is the
    output row attended by the query side's global/aggregate slot."""

    tokens: Tensor        # (m, d), m = query-side length
    global_token: Tensor  # (1, d)
    source_pair: tuple[str, str]  # (query modality, key/value modality)


def cross_attend(query_seq: TokenSequence, kv_seq: TokenSequence,
                 p: AttentionParams) -> CrossAlignedSequence:
    """One multi-head cross-attention layer; output length = query length."""
    if query_seq.dim != kv_seq.dim:
        raise ShapeError(f"cross_attend dim mismatch: {query_seq.dim} vs {kv_seq.dim}")
    out = multi_head_attention(query_seq.tokens, kv_seq.tokens, p)
    return CrossAlignedSequence(
        tokens=out,
        global_token=T.take_rows(out, [query_seq.global_index]),
        source_pair=(query_seq.modality, kv_seq.modality),
    )


def unit_sequence(seq: TokenSequence) -> TokenSequence:
    """Row-normalized copy of a token sequence.

    Text and visual encoder outputs trained from scratch settle at very
    different magnitudes; feeding unit-norm rows into the shared
    cross-attention keeps its logit scale comparable across modalities, which
    is what lets the text-queried training regime carry over to the purely
    visual inference regime.
    """
    return TokenSequence(T.normalize_rows(seq.tokens), modality=seq.modality,
                         has_global=seq.has_global)


def triplet_loss(anchors: list[CrossAlignedSequence],
                 positives: list[CrossAlignedSequence],
                 negatives: list[CrossAlignedSequence],
                 w: LossWeights) -> Tensor:
    """Margin loss on the cross-attended global tokens, averaged over triplets."""
    if not (len(anchors) == len(positives) == len(negatives)):
        raise ShapeError(f"triplet arms differ in length: "
                         f"{len(anchors)}/{len(positives)}/{len(negatives)}")
    if not anchors:
        raise ShapeError("triplet_loss needs at least one triplet")
    total = None
    for a, p, n in zip(anchors, positives, negatives):
        d_pos = T.l2_norm(T.sub(a.global_token, p.global_token))
        d_neg = T.l2_norm(T.sub(a.global_token, n.global_token))
        term = T.relu(T.add(T.sub(d_pos, d_neg), Tensor(w.margin)))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(anchors))


class RelationNetParams:
    """Two FC layers with ReLU and dropout between, ending in a scalar head.

    Each row of the token-pair cosine kernel is reduced to its (max, mean)
    statistics, so the scorer is agnostic to token counts and one parameter
    set serves both the text-length training pairs and the patch-length
    inference pairs. ``zero_norm_warnings`` counts tokens whose cosine was
    undefined and treated as 0.
    """

    def __init__(self, hidden: int, dropout: float, rng: np.random.Generator):
        self.hidden = hidden
        self.dropout = dropout
        self.w1 = Tensor(trunc_normal(rng, (2, hidden), std=0.5), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (hidden, 1), std=0.5), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)
        self.zero_norm_warnings = 0

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def relation_score(a: CrossAlignedSequence, b: CrossAlignedSequence,
                   p: RelationNetParams, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Match probability in (0, 1) from the all-pairs cosine kernel."""
    zero_rows = int((np.linalg.norm(a.tokens.data, axis=1) == 0).sum()
                    + (np.linalg.norm(b.tokens.data, axis=1) == 0).sum())
    if zero_rows:
        p.zero_norm_warnings += zero_rows
        log.warning("relation_score: %d zero-norm token(s), cosine treated as 0", zero_rows)
    kernel = T.matmul(T.normalize_rows(a.tokens), T.transpose(T.normalize_rows(b.tokens)))
    stats = T.concat_cols([T.row_max(kernel), T.row_mean(kernel)])
    h = T.relu(T.add_rows(T.matmul(stats, p.w1), p.b1))
    if train and p.dropout > 0:
        h = T.dropout(h, p.dropout, train, rng)
    per_row = T.add_rows(T.matmul(h, p.w2), p.b2)
    return T.sigmoid(T.mean(per_row))


def matching_loss(scores: list[list[Tensor]], labels_q: list[int],
                  labels_g: list[int]) -> Tensor:
    """Mean squared error between relation scores and the same-label indicator.

    The double sum is normalized by N*M so the loss weight keeps its meaning
    across batch sizes.
    """
    n, m = len(labels_q), len(labels_g)
    if len(scores) != n or any(len(row) != m for row in scores):
        raise ShapeError(f"scores must be {n}x{m} to match the label lists")
    if n == 0 or m == 0:
        raise ShapeError("matching_loss needs at least one query and one gallery item")
    total = None
    for i in range(n):
        for j in range(m):
            target = 1.0 if labels_q[i] == labels_g[j] else 0.0
            diff = T.sub(scores[i][j], Tensor(target))
            sq = T.mul(diff, diff)
            total = sq if total is None else T.add(total, sq)
    return T.scale(total, 1.0 / (n * m))


@dataclass
class LossReport:
    total: Tensor        # combined scalar, still attached to the tape
    l_tri: float
    l_rn: float
    l_total: float
    triplet_count: int


def combined_loss(l_tri: Tensor, l_rn: Tensor, w: LossWeights,
                  triplet_count: int = 0) -> LossReport:
    total = T.add(T.scale(l_tri, w.lambda_tri), T.scale(l_rn, w.lambda_rn))
    return LossReport(total=total, l_tri=l_tri.item(), l_rn=l_rn.item(),
                      l_total=total.item(), triplet_count=triplet_count)


def score_pair(sketch: TokenSequence, image: TokenSequence, model) -> float:
    """Similarity of an encoded sketch/image pair, text-free and deterministic.

    Cross-attention runs in both directions on the visual features and the
    relation net scores the pair; the global-token distance is logged for
    inspection but never used for ranking.
    """
    if sketch.modality != "sketch" or image.modality != "image":
        raise ValueError(f"score_pair got modalities {sketch.modality!r}/{image.modality!r}")
    sketch_n, image_n = unit_sequence(sketch), unit_sequence(image)
    s2i = cross_attend(sketch_n, image_n, model.cross_params("sketch", "image"))
    if model.cfg.model.inference_direction == "sketch_to_image":
        r = relation_score(s2i, CrossAlignedSequence(image_n.tokens,
                                                     T.take_rows(image_n.tokens, [0]),
                                                     ("image", "image")),
                           model.relation, train=False)
    else:
        i2s = cross_attend(image_n, sketch_n, model.cross_params("image", "sketch"))
        # row side carries sketch-value content, matching the training kernel
        r = relation_score(i2s, s2i, model.relation, train=False)
        if log.isEnabledFor(logging.DEBUG):
            gap = T.l2_norm(T.sub(s2i.global_token, i2s.global_token)).item()
            log.debug("score_pair: relation=%.6f global_l2=%.6f", r.item(), gap)
    return r.item()
