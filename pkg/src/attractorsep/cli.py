"""Command-line interface.

Subcommands: gen-data, train, separate, evaluate, cluster-bench. Every
command is deterministic given --seed, and report-producing commands echo
their resolved configuration and render a figure next to the delimited
output. Exit codes: 0 ok, 2 bad config/input, 3 numeric abort, 4 artifact
mismatch.
"""

from __future__ import annotations

import argparse
import csv
import sys
from itertools import permutations
from pathlib import Path

import numpy as np

from . import report
from .clustering import ClusterConfig, kmeans
from .config import REGISTRY, RunConfig, echo_config, resolve
from .data import CorpusSpec, build_corpus, load_corpus, load_example, load_manifest
from .dsp import frame_params, read_wav, resample, write_wav
from .errors import (
    ArtifactMismatchError,
    ConfigError,
    DegenerateInputError,
    InputTooShortError,
    InvalidInputError,
    NumericsError,
)
from .metrics import si_sdri
from .model import EmbeddingNetwork, NetConfig
from .train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    separate,
    train,
    write_metrics_log,
)


def _corpus_spec(cfg: RunConfig) -> CorpusSpec:
    return CorpusSpec(
        n_train=cfg.n_train,
        n_val=cfg.n_val,
        n_test=cfg.n_test,
        k_set=cfg.k_set,
        duration_s=cfg.duration_s,
        sample_rate=cfg.sample_rate,
        source_family=cfg.source_family,
        seed=cfg.seed,
    )


def _net_config(cfg: RunConfig) -> NetConfig:
    frame_len, _ = frame_params(cfg.sample_rate, cfg.frame_ms, cfg.overlap)
    return NetConfig(
        input_dim=frame_len // 2 + 1,
        embedding_dim=cfg.embedding_dim,
        hidden=cfg.hidden,
        recurrent_layers=cfg.recurrent_layers,
        recurrent_units=cfg.recurrent_units,
        cell=cfg.cell,
        seed=cfg.seed,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        lr_schedule=cfg.lr_schedule,
        L_unfold=cfg.unfold,
        metric=cfg.metric,
        k=cfg.k,
        seed=cfg.seed,
        loss_head=cfg.head,
        weighting=cfg.weighting,
        energy_fraction=cfg.energy_fraction,
        temperature=cfg.temperature,
        val_every=cfg.val_every,
        val_inference_iters=cfg.inference_iters,
    )


def cmd_gen_data(args) -> int:
    cfg = resolve(args.config, overrides=_overrides(args))
    out = Path(args.out)
    manifests = build_corpus(_corpus_spec(cfg), out)
    echo_config(cfg, out / "resolved_config.txt")
    for split, path in sorted(manifests.items()):
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args.config, overrides=_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_corpus(args.corpus)
    net = EmbeddingNetwork(_net_config(cfg))
    result = train(net, dataset, _train_config(cfg),
                   frame_ms=cfg.frame_ms, overlap=cfg.overlap)
    save_checkpoint(result.model, out / "model.ckpt")
    write_metrics_log(result.log, out / "metrics.csv")
    report.training_figure(result.log, out / "training.png")
    echo_config(cfg, out / "resolved_config.txt")
    if result.model.fixed_attractors is not None:
        np.savetxt(out / "fixed_attractors.csv", result.model.fixed_attractors,
                   delimiter=",")
    last = result.log[-1]
    print(
        f"trained {cfg.head} for {cfg.epochs} epochs: "
        f"loss {last['train_loss']:.6f}, val SI-SDRi {last['val_si_sdri']:.2f} dB, "
        f"skipped {result.skipped}"
    )
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_separate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    mixture = read_wav(args.mixture)
    if mixture.sample_rate != model.sample_rate:
        mixture = resample(mixture, model.sample_rate)
    outs = separate(model, mixture, k=args.k, strategy=args.strategy,
                    inference_iters=args.iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(outs, start=1):
        path = out / f"out_{i}.wav"
        write_wav(path, w, fmt="float32")
        print(path)
    return 0


def _eval_rows(model, examples, records, strategy, iters):
    mean, scores = evaluate(model, examples, strategy, inference_iters=iters)
    rows = []
    for i, (rec, score) in enumerate(zip(records, scores)):
        rows.append(
            {
                "utt": i,
                "mix": rec.mixture_path,
                "k": rec.k,
                "si_sdr_db": score.si_sdr_db,
                "si_sdri_db": score.si_sdri_db,
            }
        )
    return mean, rows


def cmd_evaluate(args) -> int:
    cfg = resolve(args.config, overrides=_overrides(args))
    strategy = cfg.strategy
    if args.metric is not None:
        strategy = f"e2-{'euclid' if args.metric == 'euclidean' else 'spherical'}"
    model = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    examples = [load_example(r) for r in records]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.unfold_sweep:
        l_values = [int(x) for x in args.unfold_sweep.split(",")]
        sweep = []
        for l in l_values:
            mean, _ = evaluate(model, examples, "unfolded", inference_iters=l)
            sweep.append({"L": l, "mean_si_sdri_db": mean})
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["L", "mean_si_sdri_db"])
            writer.writeheader()
            writer.writerows(sweep)
        report.sweep_figure(l_values, [r["mean_si_sdri_db"] for r in sweep],
                            out / "sweep.png")
        for row in sweep:
            print(f"L={row['L']}: {row['mean_si_sdri_db']:.3f} dB")
        echo_config(cfg, out / "resolved_config.txt")
        return 0
    mean, rows = _eval_rows(model, examples, records, strategy, cfg.inference_iters)
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["utt", "mix", "k", "si_sdr_db", "si_sdri_db"]
        )
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow(
            {
                "utt": "mean",
                "mix": "",
                "k": "",
                "si_sdr_db": float(np.mean([r["si_sdr_db"] for r in rows])),
                "si_sdri_db": mean,
            }
        )
    report.evaluation_figure([r["si_sdri_db"] for r in rows], mean, out / "results.png")
    echo_config(cfg, out / "resolved_config.txt")
    print(f"mean SI-SDRi over {len(rows)} utterances ({strategy}): {mean:.3f} dB")
    return 0


def bench_instance(shape: str, k: int, n_points: int, dim: int, rng):
    """Synthetic embedding cloud with known per-cluster ideal attractors.

    ray:  clusters lie along separated directions from the origin with a
          wide radius spread (the shape confident similarity training
          produces); ball: isotropic blobs around separated centers.

    Returns:
        (points, labels, ideal) where ideal[l] is the mean of cluster l.
    """
    if shape not in ("ray", "ball"):
        raise InvalidInputError("shape must be ray or ball")
    sizes = np.full(k, n_points // k)
    sizes[: n_points % k] += 1
    while True:
        centers = rng.standard_normal((k, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        cos = centers @ centers.T
        if k == 1 or np.max(cos[~np.eye(k, dtype=bool)]) < 0.5:
            break
    points, labels = [], []
    for l in range(k):
        if shape == "ray":
            radii = rng.uniform(0.2, 3.0, sizes[l])
            cloud = radii[:, None] * centers[l] + 0.05 * radii[:, None] * rng.standard_normal(
                (sizes[l], dim)
            )
        else:
            cloud = 2.5 * centers[l] + 0.3 * rng.standard_normal((sizes[l], dim))
        points.append(cloud)
        labels.append(np.full(sizes[l], l))
    points = np.concatenate(points)
    labels = np.concatenate(labels)
    ideal = np.stack([points[labels == l].mean(axis=0) for l in range(k)])
    return points, labels, ideal


def _centroid_errors(centroids: np.ndarray, ideal: np.ndarray):
    """Mean cosine and Euclidean distance under the best matching."""
    k = ideal.shape[0]
    best = None
    for perm in permutations(range(k)):
        cost = sum(np.linalg.norm(centroids[perm[l]] - ideal[l]) for l in range(k))
        if best is None or cost < best[0]:
            best = (cost, perm)
    perm = best[1]
    cos = []
    euc = []
    for l in range(k):
        c, a = centroids[perm[l]], ideal[l]
        denom = np.linalg.norm(c) * np.linalg.norm(a) + 1e-12
        cos.append(1.0 - float(c @ a) / denom)
        euc.append(float(np.linalg.norm(c - a)))
    return float(np.mean(cos)), float(np.mean(euc))


def cluster_bench(shape="ray", k=2, n_points=60, dim=8, instances=100, seed=0,
                  iterations=50) -> list:
    """Centroid-to-ideal-attractor error of both metrics on synthetic
    embedding clouds; one row per instance."""
    rows = []
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        points, _, ideal = bench_instance(shape, k, n_points, dim, rng)
        row = {"instance": i}
        for metric in ("euclidean", "spherical"):
            cfg = ClusterConfig(k=k, metric=metric, iterations=iterations, seed=seed + i)
            state = kmeans(points, cfg)
            cos, euc = _centroid_errors(state.centroids, ideal)
            row[f"{metric}_cosine"] = cos
            row[f"{metric}_euclid"] = euc
        rows.append(row)
    return rows


def cmd_cluster_bench(args) -> int:
    cfg = resolve(args.config, overrides=_overrides(args))
    rows = cluster_bench(shape=args.shape, k=cfg.k, n_points=args.points,
                         dim=cfg.embedding_dim, instances=args.instances,
                         seed=cfg.seed, iterations=cfg.inference_iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["instance", "euclidean_cosine", "spherical_cosine",
              "euclidean_euclid", "spherical_euclid"]
    means = {f: float(np.mean([r[f] for r in rows])) for f in fields[1:]}
    with open(out / "cluster_bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({"instance": "mean", **means})
    report.cluster_bench_figure(rows, out / "cluster_bench.png")
    echo_config(cfg, out / "resolved_config.txt")
    print(
        f"{args.shape} x{args.instances}: cosine err spherical "
        f"{means['spherical_cosine']:.4f} vs euclidean {means['euclidean_cosine']:.4f}"
    )
    return 0


def _overrides(args) -> dict:
    return {key: getattr(args, key) for key in REGISTRY if hasattr(args, key)}


def _add_key_flags(parser, keys):
    for key in keys:
        entry = REGISTRY[key]
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            metavar="V", help=entry.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attractorsep",
        description="Attractor-embedding source separation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic mixture corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--k", dest="k_set", default=None, metavar="V",
                   help="source counts, e.g. 2 or 2,3")
    _add_key_flags(p, ["n_train", "n_val", "n_test", "duration_s", "sample_rate",
                       "source_family", "seed"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a separation model")
    p.add_argument("--corpus", required=True, help="directory from gen-data")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--head", dest="head", default=None, metavar="V",
                   type=lambda s: s.replace("-", "_"),
                   help="loss head: danet or kmeans-danet")
    p.add_argument("--unfold", dest="unfold", default=None, metavar="L",
                   help="in-graph k-means iterations")
    _add_key_flags(p, ["metric", "k", "epochs", "batch_size", "learning_rate",
                       "lr_schedule", "seed", "embedding_dim", "hidden",
                       "recurrent_layers", "recurrent_units", "cell", "weighting",
                       "energy_fraction", "temperature", "val_every",
                       "inference_iters", "frame_ms", "overlap"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one mixture WAV")
    p.add_argument("checkpoint", help="model checkpoint file")
    p.add_argument("mixture", help="mixture WAV file")
    p.add_argument("--out", required=True, help="output directory for out_i.wav")
    p.add_argument("--k", type=int, default=None, help="source count override")
    p.add_argument("--strategy", default=None,
                   choices=["e1", "e2-euclid", "e2-spherical", "unfolded"])
    p.add_argument("--iters", type=int, default=20,
                   help="clustering iterations at inference")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score a model against a manifest")
    p.add_argument("checkpoint", help="model checkpoint file")
    p.add_argument("manifest", help="corpus manifest CSV")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--metric", default=None, choices=["euclidean", "spherical"],
                   help="shortcut for --strategy e2-<metric>")
    p.add_argument("--unfold-sweep", default=None, metavar="1,3,5",
                   help="evaluate the unfolded strategy at each L")
    _add_key_flags(p, ["strategy", "inference_iters", "seed"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cluster-bench",
                       help="centroid error of both metrics on synthetic embeddings")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--shape", default="ray", choices=["ray", "ball"])
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--points", type=int, default=60)
    _add_key_flags(p, ["k", "embedding_dim", "seed", "inference_iters"])
    p.set_defaults(func=cmd_cluster_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, InputTooShortError,
            DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except ArtifactMismatchError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
