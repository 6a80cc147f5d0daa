"""Training loop: triplet batches, the combined objective, Adam with decoupled
weight decay, JSONL step logs, and resumable checkpoints.

Determinism contract: (seed, config, data) fixes the loss trajectory bit for
bit. Sampling and dropout draw from two dedicated generators whose states are
checkpointed, so a resumed run reproduces the unbroken one step for step.
"""

from __future__ import annotations

import hashlib
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .align import (CrossAlignedSequence, combined_loss, cross_attend,
                    matching_loss, relation_score, triplet_loss, unit_sequence,
                    LossReport)
from .config import RunConfig
from .data import DatasetManifest, ManifestEntry, RasterInstance, load_raster
from .model import RetrievalModel
from .tensor import Tape, Tensor
from .textgen import DescriptionSet, Vocabulary, build_vocabulary

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class LeakageError(AssertionError):
    """An unseen category reached a training-side code path."""


@dataclass
class TripletBatch:
    anchors: list[ManifestEntry]     # sketches
    positives: list[ManifestEntry]   # images, same label as anchor
    negatives: list[ManifestEntry]   # images, different label
    labels: list[int]                # anchor labels
    negative_labels: list[int]
    text_ids: list[list[int]]        # anchor category description tokens

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.anchors + self.positives + self.negatives:
            h.update(e.instance_id.encode())
        for ids in self.text_ids:
            h.update(bytes(str(ids), "utf-8"))
        return h.hexdigest()[:12]


def sample_triplets(manifest: DatasetManifest, descriptions: DescriptionSet,
                    rng: np.random.Generator, count: int,
                    max_text_len: int) -> TripletBatch:
    """Uniform anchors over seen-train sketches; positive same-class image,
    negative different-class image, text tokens from the anchor's category."""
    sketches = manifest.instances("seen_train", "sketch")
    images = manifest.instances("seen_train", "image")
    if not sketches or not images:
        raise ValueError("seen_train split needs both sketches and images")
    labels = manifest.label_by_category
    by_label: dict[int, list[ManifestEntry]] = {}
    for e in images:
        by_label.setdefault(labels[e.category], []).append(e)
    if len(by_label) < 2:
        raise ValueError("need at least two seen categories with images")

    anchors, positives, negatives, y, y_neg, text_ids = [], [], [], [], [], []
    for _ in range(count):
        a = sketches[int(rng.integers(len(sketches)))]
        la = labels[a.category]
        same = by_label.get(la)
        if not same:
            raise ValueError(f"category {a.category!r} has no images in seen_train")
        p = same[int(rng.integers(len(same)))]
        other_labels = [l for l in sorted(by_label) if l != la]
        ln = other_labels[int(rng.integers(len(other_labels)))]
        n = by_label[ln][int(rng.integers(len(by_label[ln])))]
        anchors.append(a)
        positives.append(p)
        negatives.append(n)
        y.append(la)
        y_neg.append(ln)
        text_ids.append(descriptions.category_ids(a.category, max_text_len))
    return TripletBatch(anchors, positives, negatives, y, y_neg, text_ids)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: RunConfig) -> None:
    """One Adam update with decoupled weight decay (decay scales the weight
    itself, it never enters the moment estimates)."""
    t = cfg.train
    state.step += 1
    bc1 = 1.0 - t.beta1 ** state.step
    bc2 = 1.0 - t.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = t.beta1 * m + (1.0 - t.beta1) * g
        v = t.beta2 * v + (1.0 - t.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + t.eps) + t.weight_decay * p.data
        p.data -= t.lr * update
        p.grad = None


# ---------------------------------------------------------------------------
# forward / step

class RasterCache:
    """Loads each manifest entry once; contents are read-only afterwards."""

    def __init__(self, manifest: DatasetManifest, cfg: RunConfig):
        self.manifest = manifest
        self.cfg = cfg
        self._cache: dict[str, RasterInstance] = {}

    def get(self, entry: ManifestEntry) -> RasterInstance:
        inst = self._cache.get(entry.instance_id)
        if inst is None:
            inst = load_raster(entry, self.cfg.data.input_size, self.cfg.data.channels,
                               manifest=self.manifest)
            self._cache[entry.instance_id] = inst
        return inst


def _guard_seen(batch: TripletBatch, manifest: DatasetManifest) -> None:
    seen = set(manifest.seen_categories)
    for e in batch.anchors + batch.positives + batch.negatives:
        if e.category not in seen:
            raise LeakageError(f"unseen category {e.category!r} in a training batch")


def guard_descriptions(descriptions: DescriptionSet, manifest: DatasetManifest) -> None:
    extra = set(descriptions.categories) - set(manifest.seen_categories)
    if extra:
        raise LeakageError(f"descriptions cover non-training categories: {sorted(extra)}")


def train_step(batch: TripletBatch, model: RetrievalModel, opt_state: AdamState,
               cfg: RunConfig, rasters: RasterCache,
               dropout_rng: np.random.Generator) -> LossReport:
    """Forward, backward, and one optimizer update on a triplet batch."""
    _guard_seen(batch, rasters.manifest)
    n = len(batch.anchors)
    with Tape() as tape:
        encoded: dict[str, object] = {}

        def enc(entry: ManifestEntry):
            # cross-attention consumers see row-normalized sequences everywhere
            seq = encoded.get(entry.instance_id)
            if seq is None:
                seq = unit_sequence(model.encode_raster(rasters.get(entry),
                                                        train=True, rng=dropout_rng))
                encoded[entry.instance_id] = seq
            return seq

        gallery = batch.positives + batch.negatives
        gallery_labels = batch.labels + batch.negative_labels

        if cfg.train.text_free:
            sp_list, ps_list, sn_list, ns_list = [], [], [], []
            scores: list[list[Tensor]] = []
            for i in range(n):
                s = enc(batch.anchors[i])
                row = []
                for j, img in enumerate(gallery):
                    si = cross_attend(s, enc(img), model.cross_params("sketch", "image"))
                    is_ = cross_attend(enc(img), s, model.cross_params("image", "sketch"))
                    row.append(relation_score(is_, si, model.relation,
                                              train=True, rng=dropout_rng))
                    if j == i:            # gallery = positives + negatives, in order
                        sp_list.append(si)
                        ps_list.append(is_)
                    elif j == n + i:
                        sn_list.append(si)
                        ns_list.append(is_)
                scores.append(row)
            # triplet arms: pull (s->p, p->s) together, push (s->n, n->s) apart
            l_tri = _pairwise_triplet(sp_list, ps_list, sn_list, ns_list, cfg.loss)
        else:
            texts: dict[str, object] = {}

            def text_seq(i: int):
                cat = batch.anchors[i].category
                seq = texts.get(cat)
                if seq is None:
                    seq = unit_sequence(model.encode_text_ids(batch.text_ids[i],
                                                              train=True,
                                                              rng=dropout_rng))
                    texts[cat] = seq
                return seq

            sketch_side, pos_side, neg_side = [], [], []
            scores = []
            for i in range(n):
                t_i = text_seq(i)
                ts = cross_attend(t_i, enc(batch.anchors[i]),
                                  model.cross_params("text", "sketch"))
                sketch_side.append(ts)
                pos_side.append(cross_attend(t_i, enc(batch.positives[i]),
                                             model.cross_params("text", "image")))
                neg_side.append(cross_attend(t_i, enc(batch.negatives[i]),
                                             model.cross_params("text", "image")))
                row = []
                for img in gallery:
                    ti = cross_attend(t_i, enc(img), model.cross_params("text", "image"))
                    row.append(relation_score(ts, ti, model.relation,
                                              train=True, rng=dropout_rng))
                scores.append(row)
            l_tri = triplet_loss(sketch_side, pos_side, neg_side, cfg.loss)

        l_rn = matching_loss(scores, batch.labels, gallery_labels)
        report = combined_loss(l_tri, l_rn, cfg.loss, triplet_count=n)

        if not math.isfinite(report.l_total):
            raise TrainingDiverged(
                f"non-finite loss at optimizer step {opt_state.step + 1}: "
                f"l_tri={report.l_tri} l_rn={report.l_rn} "
                f"params={model.parameter_digest()} batch={batch.digest()}")
        tape.backward(report.total)
    adam_step(model.params, opt_state, cfg)
    return report


def _pairwise_triplet(pos_a, pos_b, neg_a, neg_b, weights) -> Tensor:
    """Text-free triplet: pull the matched pair's two cross-views together,
    push the mismatched pair's views apart by the margin."""
    total = None
    for pa, pb, na, nb in zip(pos_a, pos_b, neg_a, neg_b):
        d_pos = T.l2_norm(T.sub(pa.global_token, pb.global_token))
        d_neg = T.l2_norm(T.sub(na.global_token, nb.global_token))
        term = T.relu(T.add(T.sub(d_pos, d_neg), Tensor(weights.margin)))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(pos_a))


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path: str | Path, model: RetrievalModel, opt_state: AdamState,
                    cfg: RunConfig, vocab: Vocabulary,
                    sampler_rng: np.random.Generator | None = None,
                    dropout_rng: np.random.Generator | None = None) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        arrays[f"param/{name}"] = p.data
    for name, arr in opt_state.m.items():
        arrays[f"adam_m/{name}"] = arr
        arrays[f"adam_v/{name}"] = opt_state.v[name]
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_digest": cfg.model_digest,
        "train_digest": cfg.train_digest,
        "config_digest": cfg.digest,
        "config": cfg.to_dict(),
        "vocab": vocab.tokens,
        "step": opt_state.step,
        "sampler_rng": _rng_state(sampler_rng),
        "dropout_rng": _rng_state(dropout_rng),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, cfg: RunConfig, resume: bool = False):
    """Restore (model, opt_state, vocab, rng states); refuses digest mismatches."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, EOFError, KeyError) as exc:
        raise CheckpointError(f"unreadable or truncated checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r} unsupported")
    if meta["model_digest"] != cfg.model_digest:
        raise CheckpointError(
            f"checkpoint model digest {meta['model_digest']} does not match the "
            f"current config ({cfg.model_digest}); refusing to mix")
    if resume and meta["train_digest"] != cfg.train_digest:
        raise CheckpointError(
            f"checkpoint training digest {meta['train_digest']} does not match "
            f"({cfg.train_digest}); cannot resume faithfully")

    vocab = Vocabulary(list(meta["vocab"]))
    model = RetrievalModel(cfg, vocab_size=len(vocab), init_seed=cfg.train.seed)
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} shape {arrays[key].shape} "
                                  f"does not match model {p.data.shape}")
        p.data = np.ascontiguousarray(arrays[key].astype(np.float64))
    state = AdamState(step=int(meta["step"]))
    for name in model.params:
        mk, vk = f"adam_m/{name}", f"adam_v/{name}"
        if mk in arrays:
            state.m[name] = np.ascontiguousarray(arrays[mk].astype(np.float64))
            state.v[name] = np.ascontiguousarray(arrays[vk].astype(np.float64))
    return model, state, vocab, meta


def _rng_state(rng: np.random.Generator | None):
    return None if rng is None else rng.bit_generator.state


def restore_rng(state) -> np.random.Generator | None:
    if state is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    model: RetrievalModel
    opt_state: AdamState
    losses: list[LossReport]
    checkpoint: Path | None = None


def prepare_descriptions(descriptions: DescriptionSet, manifest: DatasetManifest,
                         cfg: RunConfig) -> Vocabulary:
    guard_descriptions(descriptions, manifest)
    vocab = build_vocabulary(descriptions)
    descriptions.tokenize_all(vocab, cfg.text.max_text_len)
    return vocab


def train(cfg: RunConfig, manifest: DatasetManifest, descriptions: DescriptionSet,
          out_dir: str | Path | None = None, max_steps: int | None = None,
          resume_from: str | Path | None = None, log_path: str | Path | None = None,
          eval_hook=None) -> TrainResult:
    """Run the full loop; returns the trained model and per-step reports.

    ``eval_hook(model, epoch) -> dict`` runs every ``eval_every`` epochs and its
    result lands in the log. ``max_steps`` truncates the run (resume tests).
    """
    vocab = prepare_descriptions(descriptions, manifest, cfg)
    rasters = RasterCache(manifest, cfg)

    if resume_from is not None:
        model, opt_state, ck_vocab, meta = load_checkpoint(resume_from, cfg, resume=True)
        if ck_vocab.tokens != vocab.tokens:
            raise CheckpointError("checkpoint vocabulary differs from the descriptions file")
        sampler_rng = restore_rng(meta["sampler_rng"])
        dropout_rng = restore_rng(meta["dropout_rng"])
        if sampler_rng is None or dropout_rng is None:
            raise CheckpointError("checkpoint lacks rng states; cannot resume")
    else:
        model = RetrievalModel(cfg, vocab_size=len(vocab), init_seed=cfg.train.seed)
        opt_state = AdamState()
        sampler_rng = np.random.default_rng([cfg.train.seed, 1])
        dropout_rng = np.random.default_rng([cfg.train.seed, 2])

    n_anchor = len(manifest.instances("seen_train", "sketch"))
    steps_per_epoch = max(1, math.ceil(n_anchor / cfg.train.triplets))
    total_steps = cfg.train.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, opt_state.step + max_steps)

    log_fh = open(log_path, "a") if log_path else None
    losses: list[LossReport] = []
    try:
        while opt_state.step < total_steps:
            batch = sample_triplets(manifest, descriptions, sampler_rng,
                                    cfg.train.triplets, cfg.text.max_text_len)
            report = train_step(batch, model, opt_state, cfg, rasters, dropout_rng)
            losses.append(report)
            if log_fh:
                log_fh.write(json.dumps({"step": opt_state.step, "l_tri": report.l_tri,
                                         "l_rn": report.l_rn,
                                         "l_total": report.l_total}) + "\n")
                log_fh.flush()
            epoch_done = opt_state.step % steps_per_epoch == 0
            epoch = opt_state.step // steps_per_epoch
            if (eval_hook is not None and cfg.train.eval_every > 0 and epoch_done
                    and epoch % cfg.train.eval_every == 0):
                summary = eval_hook(model, epoch)
                if log_fh and summary:
                    log_fh.write(json.dumps({"eval_epoch": epoch, **summary}) + "\n")
                    log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(Path(out_dir) / "checkpoint.npz", model, opt_state,
                               cfg, vocab, sampler_rng, dropout_rng)
    return TrainResult(model, opt_state, losses, ckpt)
