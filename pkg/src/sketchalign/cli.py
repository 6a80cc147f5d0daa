"""Operator command line: synth-data, gen-descriptions, train, evaluate,
retrieve, gradcheck. All commands are non-interactive; exit codes are 0 on
success, 2 for usage problems, 1 for runtime failures."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import textgen
from .config import RunConfig
from .gradcheck import run_op_checks
from .train import (CheckpointError, LeakageError, TrainingDiverged,
                    load_checkpoint, train)

USAGE_EXIT = 2
RUNTIME_EXIT = 1


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.profile(args.profile)
    train_over = {}
    for flag in ("seed", "epochs", "triplets", "lr"):
        val = getattr(args, flag, None)
        if val is not None:
            train_over[flag] = val
    if getattr(args, "text_free", False):
        train_over["text_free"] = True
    if getattr(args, "eval_every", None) is not None:
        train_over["eval_every"] = args.eval_every
    over = {}
    if train_over:
        over["train"] = train_over
    if getattr(args, "template", None) is not None:
        over["text"] = {"template_id": args.template}
    return cfg.override(**over) if over else cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", default="desk", choices=["desk", "paper"],
                   help="shipped config profile (default: desk)")
    p.add_argument("--config", help="path to a full config JSON (overrides --profile)")


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"parent of output directory does not exist: {out.parent}")
    spec = cfg.synthetic
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
        cfg = cfg.override(synthetic={"seed": args.seed})
    manifest = data_mod.generate_synthetic(spec, out, data_digest=cfg.data_digest)
    print(out / "manifest.json")
    print(f"categories={len(manifest.categories)} "
          f"seen={len(manifest.seen_categories)} unseen={len(manifest.unseen_categories)} "
          f"entries={len(manifest.entries)} tree_digest={data_mod.tree_digest(out)}")
    return 0


def cmd_gen_descriptions(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.load_manifest(args.manifest)
    template = textgen.TEMPLATES[cfg.text.template_id]
    if args.offline_corpus:
        client = textgen.OfflineCorpusClient(args.offline_corpus)
    else:
        client = textgen.HttpEndpointClient(url=args.endpoint)
    desc = textgen.generate_descriptions(
        manifest.seen_categories, template, client, k=cfg.text.k_sentences,
        cache_dir=args.cache, data_digest=cfg.data_digest)
    out = Path(args.out)
    desc.save(out)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.load_manifest(args.manifest)
    if manifest.data_digest and manifest.data_digest != cfg.data_digest:
        raise CheckpointError(
            f"manifest data digest {manifest.data_digest} does not match the "
            f"current config ({cfg.data_digest}); refusing to mix")
    descriptions = textgen.load_descriptions(args.descriptions)
    if descriptions.data_digest and descriptions.data_digest != cfg.data_digest:
        raise CheckpointError(
            f"descriptions data digest {descriptions.data_digest} does not match "
            f"the current config ({cfg.data_digest}); refusing to mix")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    eval_hook = None
    if cfg.train.eval_every > 0:
        def eval_hook(model, epoch):
            rep = metrics_mod.evaluate(manifest, "seen_test", model, cfg)
            return {"split": "seen_test", "map_all": rep.map_at["all"]}

    result = train(cfg, manifest, descriptions, out_dir=out_dir,
                   max_steps=args.steps, resume_from=args.resume,
                   log_path=out_dir / "train_log.jsonl", eval_hook=eval_hook)
    print(result.checkpoint)
    last = result.losses[-1] if result.losses else None
    if last:
        print(f"steps={result.opt_state.step} l_total={last.l_total:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.load_manifest(args.manifest)
    model, _, _, meta = load_checkpoint(args.checkpoint, cfg)
    report, rankings = metrics_mod.evaluate(manifest, args.split, model, cfg,
                                            collect_rankings=True)
    if args.oracle:
        ids = [r.query_id for r in rankings]
        gallery = manifest.instances(args.split, "image")
        labels = manifest.label_by_category
        gids = [e.instance_id for e in gallery]
        glabels = [labels[e.category] for e in gallery]
        qlabels = [r.query_label for r in rankings]
        score_by_gid = [dict(r.ranking) for r in rankings]
        matrix = np.array([[score_by_gid[i][g] for g in gids] for i in range(len(ids))])
        oracle = metrics_mod.oracle_metrics(matrix, qlabels, glabels, gallery_ids=gids)
        for key in ("all", "200"):
            if abs(oracle.map_at[key] - report.map_at[key]) > 0:
                raise RuntimeError(f"oracle disagreement on mAP@{key}: "
                                   f"{oracle.map_at[key]} vs {report.map_at[key]}")
        for key in ("100", "200"):
            if abs(oracle.prec_at[key] - report.prec_at[key]) > 0:
                raise RuntimeError(f"oracle disagreement on Prec@{key}")
        print("oracle check: ok")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"report_{args.split}.json"
    metrics_mod.write_report(out, report, cfg, args.split,
                             extra={"checkpoint_step": meta.get("step")})
    if args.rank_csv:
        metrics_mod.write_rank_csv(args.rank_csv, rankings)
    print(out)
    print(f"map_all={report.map_at['all']:.4f} map_200={report.map_at['200']:.4f} "
          f"prec_100={report.prec_at['100']:.4f} prec_200={report.prec_at['200']:.4f}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.load_manifest(args.gallery_manifest)
    model, _, _, _ = load_checkpoint(args.checkpoint, cfg)
    query = data_mod.load_raster(args.sketch, cfg.data.input_size, cfg.data.channels)
    gallery_entries = manifest.instances(args.split, "image")
    gallery = [data_mod.load_raster(e, cfg.data.input_size, cfg.data.channels,
                                    manifest=manifest) for e in gallery_entries]
    result = metrics_mod.rank_gallery(query, gallery, model)
    top = result.ranking[:args.top]
    print(f"{'rank':>4}  {'score':>8}  gallery_id")
    for rank, (gid, score) in enumerate(top, start=1):
        print(f"{rank:>4}  {score:8.4f}  {gid}")
    if args.csv:
        metrics_mod.write_rank_csv(args.csv, [result])
    return 0


def cmd_gradcheck(args) -> int:
    names = None if args.module in (None, "all") else args.module.split(",")
    results = run_op_checks(names=names, seed=args.seed or 0, corrupt=args.corrupt_op)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_err:.3e}  tol={r.tol:.0e}  {status}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchalign",
                                 description="sketch-image retrieval pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("gen-descriptions", help="produce per-category descriptions")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--template", type=int, choices=[1, 2, 3, 4],
                   help="prompt template id (default from config)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--offline-corpus", help="canned corpus JSONL; bypasses the network")
    src.add_argument("--endpoint", help="HTTP endpoint URL")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", help="description cache directory")
    p.set_defaults(fn=cmd_gen_descriptions)

    p = sub.add_parser("train", help="train on the seen split")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--descriptions", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--triplets", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--eval-every", type=int, help="epochs between seen-test evals")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--text-free", action="store_true",
                   help="ablation: train with direct sketch-image cross-attention")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="rank a split's gallery and write a report")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="unseen", choices=["seen_train", "seen_test", "unseen"])
    p.add_argument("--out")
    p.add_argument("--rank-csv")
    p.add_argument("--oracle", action="store_true",
                   help="recompute metrics with the brute-force oracle and compare")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("retrieve", help="rank the gallery for one sketch file")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sketch", required=True)
    p.add_argument("--gallery-manifest", required=True)
    p.add_argument("--split", default="unseen", choices=["seen_train", "seen_test", "unseen"])
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    p.add_argument("--module", default="all", help="comma-separated op names or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)  # test hook
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainingDiverged, CheckpointError, LeakageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except (FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
