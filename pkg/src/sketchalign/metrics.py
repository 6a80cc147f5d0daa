"""Ranked-retrieval evaluation: gallery ranking, mAP@all / mAP@k, Prec@k,
plus an independent brute-force oracle used to cross-check every number.

Conventions, recorded in every report because they vary across papers:
average precision divides by the number of relevant items inside the cutoff
window (total relevant for the uncut list); queries with no relevant gallery
item score 0 and stay in the mean; score ties break by ascending gallery id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DatasetManifest, RasterInstance, load_raster

AP_CONVENTION = "ap-denominator=relevant-within-cutoff; zero-relevant queries count as 0"


@dataclass
class RankedResult:
    query_id: str
    ranking: list[tuple[str, float]]  # (gallery_id, score), scores non-increasing
    query_label: int
    gallery_labels: list[int]         # aligned with ranking order

    def relevance(self) -> list[int]:
        return [1 if l == self.query_label else 0 for l in self.gallery_labels]


@dataclass
class MetricReport:
    map_at: dict[str, float]
    prec_at: dict[str, float]
    per_query_ap: list[float]
    query_count: int
    ap_convention: str = AP_CONVENTION


def average_precision(relevance: list[int], cutoff: int | None = None) -> float:
    """AP over the ranked relevance bits, restricted to the cutoff window."""
    window = relevance if cutoff is None else relevance[:cutoff]
    hits = 0
    acc = 0.0
    for rank, rel in enumerate(window, start=1):
        if rel:
            hits += 1
            acc += hits / rank
    return acc / hits if hits else 0.0


def precision_at_k(relevance: list[int], k: int) -> float:
    """Relevant fraction of the top k; short galleries keep the k denominator."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sum(relevance[:k]) / k


def sort_by_score(ids: list[str], scores: list[float]) -> list[int]:
    """Indices ordered by descending score, ties broken by ascending id."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return order


def rank_gallery(query: RasterInstance, gallery: list[RasterInstance],
                 model) -> RankedResult:
    """Score every gallery image against one query sketch and sort canonically."""
    if not gallery:
        raise ValueError("rank_gallery: empty gallery")
    q = model.encode_raster(query)
    encoded = [model.encode_raster(g) for g in gallery]
    return rank_encoded(query.instance_id, query.category_label, q,
                        [(g.instance_id, g.category_label, e) for g, e in zip(gallery, encoded)],
                        model)


def rank_encoded(query_id: str, query_label: int, query_seq,
                 gallery_encoded: list[tuple[str, int, object]], model) -> RankedResult:
    ids = [gid for gid, _, _ in gallery_encoded]
    labels = [gl for _, gl, _ in gallery_encoded]
    scores = [model.score_pair(query_seq, seq) for _, _, seq in gallery_encoded]
    order = sort_by_score(ids, scores)
    return RankedResult(
        query_id=query_id,
        ranking=[(ids[i], scores[i]) for i in order],
        query_label=query_label,
        gallery_labels=[labels[i] for i in order],
    )


def metrics_from_rankings(rankings: list[RankedResult],
                          ks: tuple[int, ...] = (200,),
                          prec_ks: tuple[int, ...] = (100, 200)) -> MetricReport:
    if not rankings:
        raise ValueError("no queries to evaluate")
    n = len(rankings)
    per_ap = [average_precision(r.relevance()) for r in rankings]
    map_at = {"all": sum(per_ap) / n}
    for k in ks:
        map_at[str(k)] = sum(average_precision(r.relevance(), k) for r in rankings) / n
    prec_at = {str(k): sum(precision_at_k(r.relevance(), k) for r in rankings) / n
               for k in prec_ks}
    return MetricReport(map_at, prec_at, per_ap, n)


def metrics_from_scores(scores: np.ndarray, labels_q: list[int], labels_g: list[int],
                        gallery_ids: list[str] | None = None,
                        ks: tuple[int, ...] = (200,),
                        prec_ks: tuple[int, ...] = (100, 200)) -> MetricReport:
    """Pure-function evaluation of an (n_query, n_gallery) score matrix."""
    n, m = scores.shape
    if len(labels_q) != n or len(labels_g) != m:
        raise ValueError(f"label counts {len(labels_q)}/{len(labels_g)} do not match "
                         f"score matrix {scores.shape}")
    ids = gallery_ids if gallery_ids is not None else [f"g{j:06d}" for j in range(m)]
    rankings = []
    for i in range(n):
        row = [float(s) for s in scores[i]]
        order = sort_by_score(ids, row)
        rankings.append(RankedResult(
            query_id=f"q{i:06d}",
            ranking=[(ids[j], row[j]) for j in order],
            query_label=labels_q[i],
            gallery_labels=[labels_g[j] for j in order]))
    return metrics_from_rankings(rankings, ks=ks, prec_ks=prec_ks)


def evaluate(manifest: DatasetManifest, split: str, model, cfg: RunConfig,
             ks: tuple[int, ...] = (200,), prec_ks: tuple[int, ...] = (100, 200),
             collect_rankings: bool = False):
    """Rank the split's image gallery for each of its sketches.

    Gallery encodings are computed once and shared across queries; the pair
    scorer itself is the same code path rank_gallery uses.
    """
    queries = manifest.instances(split, "sketch")
    gallery = manifest.instances(split, "image")
    if not queries:
        raise ValueError(f"split {split!r} has no sketch queries")
    if not gallery:
        raise ValueError(f"split {split!r} has no gallery images")
    labels = manifest.label_by_category

    def load(e):
        return load_raster(e, cfg.data.input_size, cfg.data.channels, manifest=manifest)

    encoded_gallery = [(e.instance_id, labels[e.category], model.encode_raster(load(e)))
                       for e in gallery]
    rankings = []
    for e in queries:
        q = model.encode_raster(load(e))
        rankings.append(rank_encoded(e.instance_id, labels[e.category], q,
                                     encoded_gallery, model))
    report = metrics_from_rankings(rankings, ks=ks, prec_ks=prec_ks)
    return (report, rankings) if collect_rankings else report


# ---------------------------------------------------------------------------
# brute-force oracle: an independent re-implementation used only for checking

def oracle_average_precision(relevance: list[int], cutoff: int | None = None) -> float:
    """AP by exhaustive prefix counting; deliberately shares no code with
    average_precision."""
    limit = len(relevance) if cutoff is None else min(cutoff, len(relevance))
    relevant_in_window = 0
    for r in range(limit):
        if relevance[r]:
            relevant_in_window += 1
    if relevant_in_window == 0:
        return 0.0
    acc = 0.0
    for r in range(limit):
        if relevance[r]:
            prefix_hits = 0
            for q in range(r + 1):
                if relevance[q]:
                    prefix_hits += 1
            acc += prefix_hits / (r + 1)
    return acc / relevant_in_window


def oracle_precision_at_k(relevance: list[int], k: int) -> float:
    hits = 0
    for r in range(min(k, len(relevance))):
        if relevance[r]:
            hits += 1
    return hits / k


def oracle_metrics(scores: np.ndarray, labels_q: list[int], labels_g: list[int],
                   gallery_ids: list[str] | None = None,
                   ks: tuple[int, ...] = (200,),
                   prec_ks: tuple[int, ...] = (100, 200)) -> MetricReport:
    n, m = scores.shape
    ids = gallery_ids if gallery_ids is not None else [f"g{j:06d}" for j in range(m)]
    aps, ap_k, p_k = [], {k: [] for k in ks}, {k: [] for k in prec_ks}
    for i in range(n):
        pairs = sorted(((-float(scores[i][j]), ids[j], labels_g[j]) for j in range(m)))
        rel = [1 if lab == labels_q[i] else 0 for _, _, lab in pairs]
        aps.append(oracle_average_precision(rel))
        for k in ks:
            ap_k[k].append(oracle_average_precision(rel, k))
        for k in prec_ks:
            p_k[k].append(oracle_precision_at_k(rel, k))
    map_at = {"all": sum(aps) / len(aps)}
    for k in ks:
        map_at[str(k)] = sum(ap_k[k]) / len(ap_k[k])
    prec_at = {str(k): sum(p_k[k]) / len(p_k[k]) for k in prec_ks}
    return MetricReport(map_at, prec_at, aps, n)


def chance_map(labels_q: list[int], labels_g: list[int], trials: int = 1000,
               seed: int = 0) -> float:
    """Mean oracle mAP@all under uniformly random rankings of the gallery."""
    rng = np.random.default_rng(seed)
    g = np.asarray(labels_g)
    total = 0.0
    for _ in range(trials):
        perm = rng.permutation(len(g))
        shuffled = g[perm]
        aps = []
        for lq in labels_q:
            rel = [1 if l == lq else 0 for l in shuffled]
            aps.append(oracle_average_precision(rel))
        total += sum(aps) / len(aps)
    return total / trials


# ---------------------------------------------------------------------------
# report files

def write_report(path: str | Path, report: MetricReport, cfg: RunConfig,
                 split: str, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "config_digest": cfg.digest,
        "model_digest": cfg.model_digest,
        "split": split,
        "map_all": report.map_at["all"],
        "map_200": report.map_at.get("200"),
        "prec_100": report.prec_at.get("100"),
        "prec_200": report.prec_at.get("200"),
        "query_count": report.query_count,
        "ap_convention": report.ap_convention,
        "per_query": report.per_query_ap,
    }
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def write_rank_csv(path: str | Path, rankings: list[RankedResult]) -> Path:
    path = Path(path)
    lines = ["query_id,rank,gallery_id,score,relevant"]
    for r in rankings:
        rel = r.relevance()
        for rank, ((gid, score), bit) in enumerate(zip(r.ranking, rel), start=1):
            lines.append(f"{r.query_id},{rank},{gid},{score:.6f},{bit}")
    path.write_text("\n".join(lines) + "\n")
    return path
