"""Command-line pipeline over a dataset directory.

Each stage reads the manifest and/or earlier artifacts from ``--out-dir``
under canonical file names and writes its own artifact there atomically
(write-to-temp, then rename), so stages compose by sharing one directory:

    gt-dist -> build-affinity -> sample-pairs -> train-embed -> build-index
            -> retrieve / gen-prior / eval-retrieval

Every stage prints a one-line ``stage key=value ...`` summary on stdout and is
deterministic: identical inputs and seed produce byte-identical artifacts.
Numeric thread count, if you need to pin it, is numpy's usual environment
variable (``OMP_NUM_THREADS``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataset as ds
from . import embed, pairs, prior, pyramid, retrieval

DIST_FILE = "dist.gcdm"
AFFINITY_FILE = "affinity.jsonl"
PAIRS_FILE = "pairs.jsonl"
MODEL_FILE = "model.gcem"
TRACE_FILE = "loss_trace.txt"
INDEX_FILE = "index.gcpd"
EVAL_REPORT_FILE = "eval_report.json"
EVAL_SCORES_FILE = "eval_scores.txt"


def _atomic(path: Path, write: Callable[[Path], None]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def _atomic_text(path: Path, text: str) -> None:
    _atomic(path, lambda p: p.write_text(text))


def _summary(stage: str, **fields) -> None:
    parts = " ".join(f"{key}={value}" for key, value in fields.items())
    print(f"{stage} {parts}")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found (run {producer} first)")
    return path


def _load_descriptors(manifest: str) -> tuple[ds.Dataset, np.ndarray]:
    dataset = ds.load_manifest(manifest)
    if dataset.descriptors is None:
        raise ValueError("dataset has no descriptor store (descriptors.bin)")
    return dataset, dataset.descriptors.vectors


def cmd_gt_dist(args: argparse.Namespace) -> int:
    dataset = ds.load_manifest(args.manifest)
    out = _out_dir(args)
    weights = None
    if not args.no_rare_weights:
        split = None if args.freq_split == "all" else args.freq_split
        weights = pyramid.rare_class_weights(ds.class_frequency(dataset, split))
    dist = pyramid.pairwise_distances(dataset, weights, normalize=not args.raw_histograms)
    _atomic(out / DIST_FILE, lambda p: pyramid.save_distance_matrix(p, dist))
    _summary(
        "gt-dist",
        images=len(dataset),
        rare_weights=not args.no_rare_weights,
        normalized=not args.raw_histograms,
        out=DIST_FILE,
    )
    return 0


def cmd_build_affinity(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    dist = pyramid.load_distance_matrix(_require(out / DIST_FILE, "gt-dist"))
    affinity = pairs.build_affinity(dist, args.k)
    _atomic(out / AFFINITY_FILE, lambda p: pairs.save_affinity(p, affinity))
    _summary("build-affinity", images=affinity.n, k=affinity.k, out=AFFINITY_FILE)
    return 0


def cmd_sample_pairs(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    dist = pyramid.load_distance_matrix(_require(out / DIST_FILE, "gt-dist"))
    affinity = pairs.load_affinity(_require(out / AFFINITY_FILE, "build-affinity"))
    n_bound = args.n_bound if args.n_bound is not None else pairs.default_rank_bound(affinity.n)
    batch = pairs.sample_pairs(affinity, dist, args.n_pos, args.n_neg, n_bound, args.seed)
    _atomic(out / PAIRS_FILE, lambda p: pairs.save_pairs(p, batch))
    _summary(
        "sample-pairs",
        positives=args.n_pos,
        negatives=args.n_neg,
        n_bound=n_bound,
        seed=args.seed,
        out=PAIRS_FILE,
    )
    return 0


def cmd_train_embed(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    _dataset, vectors = _load_descriptors(args.manifest)
    dist = pyramid.load_distance_matrix(_require(out / DIST_FILE, "gt-dist"))
    affinity = pairs.load_affinity(_require(out / AFFINITY_FILE, "build-affinity"))
    n_bound = args.n_bound if args.n_bound is not None else pairs.default_rank_bound(affinity.n)
    sampler = pairs.PairSampler(affinity, dist, n_bound)
    config = embed.TrainConfig(
        batch_size=args.batch,
        learning_rate=args.lr,
        lr_drop_factor=args.lr_drop_factor,
        lr_drop_step=args.lr_drop_step,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        max_steps=args.steps,
        seed=args.seed,
    )
    model = embed.init_model(vectors.shape[1], args.feature_dim, args.hidden_dim, seed=args.seed)
    model, losses = embed.train(model, vectors, sampler.sample, config)
    _atomic(out / MODEL_FILE, lambda p: embed.save_model(p, model))
    _atomic_text(out / TRACE_FILE, "\n".join(repr(float(v)) for v in losses) + "\n")
    _summary(
        "train-embed",
        steps=config.max_steps,
        final_loss=f"{losses[-1]:.6f}",
        seed=args.seed,
        out=MODEL_FILE,
    )
    return 0


def cmd_build_index(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    _dataset, vectors = _load_descriptors(args.manifest)
    model = embed.load_model(_require(out / MODEL_FILE, "train-embed"))
    features = embed.embed(model, vectors)
    _atomic(out / INDEX_FILE, lambda p: ds.write_descriptors(p, features.astype(np.float32)))
    _summary("build-index", vectors=features.shape[0], dim=features.shape[1], out=INDEX_FILE)
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    index = retrieval.build_index(ds.read_descriptors(_require(out / INDEX_FILE, "build-index")))
    result = retrieval.knn_query(index, args.query, args.k)
    payload = {
        "query": result.query,
        "ids": result.ids.tolist(),
        "distances": [float(d) for d in result.distances],
    }
    name = f"retrieval_{args.query}.json"
    _atomic_text(out / name, json.dumps(payload, sort_keys=True) + "\n")
    _summary("retrieve", query=args.query, k=args.k, nearest=int(result.ids[0]), out=name)
    return 0


def cmd_gen_prior(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    dataset = ds.load_manifest(args.manifest)
    index = retrieval.build_index(ds.read_descriptors(_require(out / INDEX_FILE, "build-index")))
    if len(index) != len(dataset):
        raise ValueError(f"index of {len(index)} vectors is not aligned with {len(dataset)} images")
    result = retrieval.knn_query(index, args.query, args.k)
    retrieved = [dataset.label_maps[j] for j in result.ids.tolist()]
    num_classes = dataset.classes.num_classes

    spatial = prior.spatial_prior(retrieved, num_classes, args.grid, normalize=not args.raw_prior)
    class_ids = dataset.classes.labeled_ids() if args.all_classes else dataset.classes.things_ids()
    global_vec = prior.global_prior(retrieved, num_classes, class_ids)

    tensor_name = f"prior_{args.query}.gcpr"
    _atomic(out / tensor_name, lambda p: prior.save_prior(p, spatial))
    sidecar = {
        "query": int(args.query),
        "k_p": int(args.k),
        "retrieved": result.ids.tolist(),
        "grid": int(args.grid),
        "classes": "all" if args.all_classes else "things",
        "global_prior": [float(v) for v in global_vec],
    }
    _atomic_text(out / f"prior_{args.query}.meta.json", json.dumps(sidecar, sort_keys=True) + "\n")
    _summary("gen-prior", query=args.query, k=args.k, grid=args.grid, out=tensor_name)
    return 0


def cmd_eval_retrieval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    dataset = ds.load_manifest(args.manifest)
    index = retrieval.build_index(ds.read_descriptors(_require(out / INDEX_FILE, "build-index")))
    scores = retrieval.per_query_f_beta(dataset, index, args.k, args.beta)
    valid = scores[~np.isnan(scores)]
    if valid.size == 0:
        raise ValueError("no queries with labeled annotations")
    mean_score = float(valid.mean())

    lines = [
        f"{image_id} {'nan' if np.isnan(score) else repr(float(score))}"
        for image_id, score in zip(dataset.ids, scores)
    ]
    _atomic_text(out / EVAL_SCORES_FILE, "\n".join(lines) + "\n")
    report = {
        "beta": float(args.beta),
        "k_p": int(args.k),
        "mean_f": mean_score,
        "queries": int(valid.size),
        "per_query_scores": EVAL_SCORES_FILE,
    }
    _atomic_text(out / EVAL_REPORT_FILE, json.dumps(report, sort_keys=True) + "\n")
    _summary("eval-retrieval", k=args.k, beta=args.beta, mean_f=f"{mean_score:.4f}", out=EVAL_REPORT_FILE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scene-context",
        description="Layout-aware annotation distances, pair-trained embeddings, and retrieval priors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str, manifest: bool) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest path")
        p.add_argument("--out-dir", required=True, help="artifact directory shared by all stages")
        return p

    p = add("gt-dist", cmd_gt_dist, "pairwise pyramid chi-square distances", manifest=True)
    p.add_argument("--no-rare-weights", action="store_true", help="skip frequency weighting")
    p.add_argument("--raw-histograms", action="store_true", help="skip per-block normalization")
    p.add_argument(
        "--freq-split",
        default="all",
        help="manifest split used for frequency counting (default: all images)",
    )

    p = add("build-affinity", cmd_build_affinity, "binarized k-NN affinity matrix", manifest=False)
    p.add_argument("--k", type=int, default=10, help="neighbors per image (default 10)")

    p = add("sample-pairs", cmd_sample_pairs, "one batch of labeled training pairs", manifest=False)
    p.add_argument("--n-pos", type=int, default=8)
    p.add_argument("--n-neg", type=int, default=8)
    p.add_argument("--n-bound", type=int, default=None, help="negative rank bound (default n/2)")
    p.add_argument("--seed", type=int, default=0)

    p = add("train-embed", cmd_train_embed, "train the pair embedding on descriptors", manifest=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-drop-factor", type=float, default=0.1)
    p.add_argument("--lr-drop-step", type=int, default=1500)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--feature-dim", type=int, default=96)
    p.add_argument("--hidden-dim", type=int, default=48)
    p.add_argument("--n-bound", type=int, default=None, help="negative rank bound (default n/2)")
    p.add_argument("--seed", type=int, default=0)

    add("build-index", cmd_build_index, "embed all descriptors into a feature index", manifest=True)

    p = add("retrieve", cmd_retrieve, "k nearest neighbors of one image", manifest=False)
    p.add_argument("--query", type=int, required=True, help="query image index")
    p.add_argument("--k", type=int, default=5)

    p = add("gen-prior", cmd_gen_prior, "spatial and global priors from retrieval", manifest=True)
    p.add_argument("--query", type=int, required=True, help="query image index")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--raw-prior", action="store_true", help="mean raw counts instead of distributions")
    p.add_argument("--all-classes", action="store_true", help="global prior over all labeled classes")

    p = add("eval-retrieval", cmd_eval_retrieval, "mean F-beta of class-set retrieval", manifest=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--beta", type=float, default=2.0)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return int(args.func(args))
    except Exception as exc:  # CLI boundary: report, don't traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
