"""Training loop, model bundle, checkpoint format, and separation paths.

Two loss heads share one embedding network and parameter count:
  danet:        ground-truth attractors -> similarity masks -> MSE.
  kmeans_danet: unfolded k-means centroids -> affinity masks -> PIT MSE.

Inference strategies:
  e1:            fixed attractors collected from training (danet head).
  e2-euclid:     plain Euclidean k-means on embeddings, distance masks.
  e2-spherical:  plain spherical k-means, dot-product masks.
  unfolded:      the training-time unfolded layer, run at inference.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .clustering import (
    AttractorSet,
    ClusterConfig,
    fixed_attractors_from_training,
    kmeans,
    unfolded_kmeans_layer,
)
from .diffcore import Tape
from .dsp import (
    Waveform,
    apply_mask,
    energy_topfrac_indicator,
    flatten_tf,
    frame_params,
    istft,
    stft,
)
from .errors import (
    ArtifactMismatchError,
    DegenerateBatchError,
    DegenerateInputError,
    InvalidInputError,
    NumericsError,
)
from .metrics import si_sdri
from .model import (
    EmbeddingNetwork,
    NetConfig,
    danet_masks,
    dominance_indicators,
    embed,
    ground_truth_attractors,
    kmeans_masks,
    masks_to_maskset,
    mse_loss,
    pit_loss,
)

HEADS = ("danet", "kmeans_danet")
STRATEGIES = ("e1", "e2-euclid", "e2-spherical", "unfolded")

# Stage boundaries and divisors of the *initial* rate: 1e-3 becomes
# 1e-3/3, 1e-4, 1e-3/30, 1e-5 at epochs 150, 225, 300, 325.
DEFAULT_LR_SCHEDULE = ((150, 3.0), (225, 10.0), (300, 30.0), (325, 100.0))

_MAGIC = b"ATRSEP01"
_CKPT_VERSION = 1
_FLATTENING = "time-major row-major (i = t*F + f)"


@dataclass
class TrainConfig:
    """Optimization settings.

    lr_schedule entries are (epoch, divisor) pairs; from that epoch on the
    rate is learning_rate / divisor. L_unfold is the in-graph iteration
    count for the kmeans_danet head. weighting/energy_fraction control the
    point weights and the high-energy indicator used by the danet head.
    """

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_schedule: tuple = DEFAULT_LR_SCHEDULE
    L_unfold: int = 5
    metric: str = "spherical"
    k: int = 2
    seed: int = 0
    loss_head: str = "danet"
    weighting: str = "energy"
    energy_fraction: float = 0.9
    temperature: float = 1.0
    val_every: int = 1
    val_inference_iters: int = 20

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.k, self.L_unfold, self.val_every) < 1:
            raise InvalidInputError("all counts must be positive")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.loss_head not in HEADS:
            raise InvalidInputError(f"loss_head must be one of {HEADS}")
        if self.metric not in ("euclidean", "spherical"):
            raise InvalidInputError("metric must be euclidean or spherical")
        self.lr_schedule = tuple((int(e), float(d)) for e, d in self.lr_schedule)
        last = 0
        for e, d in self.lr_schedule:
            if e <= last or d < 1.0:
                raise InvalidInputError("lr_schedule epochs must increase, divisors >= 1")
            last = e


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Staged rate for a 1-based epoch; the divided value holds from the
    configured epoch onward."""
    lr = cfg.learning_rate
    for boundary, divisor in cfg.lr_schedule:
        if epoch >= boundary:
            lr = cfg.learning_rate / divisor
    return lr


class Adam:
    """Adam over the network's named parameters, in name order."""

    def __init__(self, net: EmbeddingNetwork, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in net.param_items()}
        self.v = {name: np.zeros_like(p.data) for name, p in net.param_items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.net.param_items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainedModel:
    """Network plus everything separation needs to reproduce training-time
    preprocessing and clustering."""

    net: EmbeddingNetwork
    head: str
    metric: str
    l_unfold: int
    k: int
    sample_rate: int
    frame_ms: float = 64.0
    overlap: float = 0.75
    temperature: float = 1.0
    weighting: str = "energy"
    energy_fraction: float = 0.9
    weight_final_recompute: bool = True
    cluster_top_energy_only: bool = False
    seed: int = 0
    fixed_attractors: np.ndarray = None


@dataclass
class TrainResult:
    model: TrainedModel
    log: list = field(default_factory=list)
    skipped: int = 0


def _prepare(examples: list, frame_ms: float, overlap: float) -> list:
    """Precompute spectrograms once; training re-reads them every epoch."""
    prepped = []
    for mix_w, src_ws in examples:
        prepped.append(
            (
                mix_w,
                src_ws,
                stft(mix_w, frame_ms, overlap),
                [stft(s, frame_ms, overlap) for s in src_ws],
            )
        )
    return prepped


def utterance_loss(net: EmbeddingNetwork, mix_spec, src_specs, cfg: TrainConfig, utt_seed: int):
    """Loss tensor for one utterance under the configured head.

    Returns (loss, attractors) where attractors is the (k, D) ground-truth
    attractor array for the danet head and None otherwise.
    """
    v = embed(net, mix_spec)
    if cfg.loss_head == "danet":
        ind = dominance_indicators(src_specs, mix_spec, cfg.energy_fraction)
        attractors = ground_truth_attractors(v, ind)
        masks = danet_masks(v, attractors)
        return mse_loss(src_specs, mix_spec, masks), attractors.data
    weights = flatten_tf(mix_spec.magnitude**2)
    ccfg = ClusterConfig(
        k=len(src_specs),
        metric=cfg.metric,
        iterations=cfg.L_unfold,
        weighting=cfg.weighting,
        seed=utt_seed,
    )
    centroids = unfolded_kmeans_layer(v, weights, ccfg)
    masks = kmeans_masks(v, centroids, cfg.metric, cfg.temperature)
    loss, _ = pit_loss(src_specs, mix_spec, masks)
    return loss, None


def _scale_grads(net: EmbeddingNetwork, count: int) -> None:
    for _, p in net.param_items():
        if p.grad is not None:
            p.grad = p.grad / count


def train(net: EmbeddingNetwork, dataset, cfg: TrainConfig,
          frame_ms: float = 64.0, overlap: float = 0.75) -> TrainResult:
    """Optimize the network on dataset.train, validating on dataset.val.

    One utterance per tape; batches average gradients over their
    utterances. Utterances where a speaker dominates no high-energy bin
    (or clustering degenerates) are skipped and counted, never fatal.
    A non-finite loss aborts with a diagnostic.

    Returns a TrainResult whose log holds one dict per epoch with keys
    epoch, train_loss, val_si_sdri, lr. For the danet head the final
    epoch's ground-truth attractors are condensed into fixed attractors.
    """
    if not dataset.train:
        raise InvalidInputError("training split is empty")
    sample_rate = dataset.train[0][0].sample_rate
    prepped = _prepare(dataset.train, frame_ms, overlap)
    optimizer = Adam(net)
    shuffle_rng = np.random.default_rng(cfg.seed)
    log: list = []
    skipped = 0
    attractor_history: list = []
    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate_at(cfg, epoch)
        order = shuffle_rng.permutation(len(prepped))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            contributed = 0
            for idx in batch:
                _, _, mix_spec, src_specs = prepped[idx]
                try:
                    with Tape() as tape:
                        loss, attractors = utterance_loss(
                            net, mix_spec, src_specs, cfg, utt_seed=cfg.seed + int(idx)
                        )
                        if not np.isfinite(loss.data):
                            raise NumericsError(
                                f"non-finite loss at epoch {epoch}, utterance {idx}"
                            )
                        tape.backward(loss)
                except (DegenerateBatchError, DegenerateInputError):
                    skipped += 1
                    continue
                losses.append(float(loss.data))
                contributed += 1
                if attractors is not None and epoch == cfg.epochs:
                    attractor_history.append(attractors)
            if contributed == 0:
                net.zero_grads()
                continue
            _scale_grads(net, contributed)
            optimizer.step(lr)
            net.zero_grads()
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_si_sdri": float("nan"),
            "lr": lr,
        }
        if dataset.val and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            try:
                entry["val_si_sdri"] = _validation_score(net, dataset.val, cfg,
                                                         sample_rate, frame_ms, overlap)
            except (DegenerateInputError, DegenerateBatchError):
                pass  # keep NaN; a degenerate epoch may still recover
        log.append(entry)
    fixed = None
    if cfg.loss_head == "danet" and attractor_history:
        fixed = fixed_attractors_from_training(attractor_history, cfg.k).vectors
    model = TrainedModel(
        net=net,
        head=cfg.loss_head,
        metric=cfg.metric,
        l_unfold=cfg.L_unfold,
        k=cfg.k,
        sample_rate=sample_rate,
        frame_ms=frame_ms,
        overlap=overlap,
        temperature=cfg.temperature,
        weighting=cfg.weighting,
        energy_fraction=cfg.energy_fraction,
        seed=cfg.seed,
        fixed_attractors=fixed,
    )
    return TrainResult(model=model, log=log, skipped=skipped)


def default_strategy(model: TrainedModel) -> str:
    if model.head == "danet":
        return "e2-euclid" if model.metric == "euclidean" else "e2-spherical"
    return "unfolded"


def _validation_score(net, val_examples, cfg: TrainConfig, sample_rate,
                      frame_ms, overlap) -> float:
    model = TrainedModel(
        net=net, head=cfg.loss_head, metric=cfg.metric, l_unfold=cfg.L_unfold,
        k=cfg.k, sample_rate=sample_rate, frame_ms=frame_ms, overlap=overlap,
        temperature=cfg.temperature, weighting=cfg.weighting,
        energy_fraction=cfg.energy_fraction, seed=cfg.seed,
    )
    iters = cfg.L_unfold if cfg.loss_head == "kmeans_danet" else cfg.val_inference_iters
    mean, _ = evaluate(model, val_examples, default_strategy(model), inference_iters=iters)
    return mean


def separate(model: TrainedModel, mixture: Waveform, k: int = None,
             strategy: str = None, inference_iters: int = 20) -> list:
    """Split a mixture into k estimated source waveforms.

    The cluster count k may differ from the training k for the clustered
    strategies (e2-*, unfolded); e1 is tied to the stored attractors.
    Outputs match the input length (trailing partial frames come back as
    silence) and their magnitudes sum to the mixture magnitude per bin.

    The mixture is zero-padded by one frame overlap on each side before
    analysis and trimmed after synthesis: masked spectrograms are not
    consistent, and resynthesizing them through partially covered edge
    frames would amplify the inconsistency by the tiny edge window values.
    """
    if mixture.sample_rate != model.sample_rate:
        raise InvalidInputError(
            f"mixture rate {mixture.sample_rate} != model rate {model.sample_rate}; "
            "resample first"
        )
    k = model.k if k is None else int(k)
    if k < 1:
        raise InvalidInputError("k must be positive")
    strategy = (strategy or default_strategy(model)).lower()
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"strategy must be one of {STRATEGIES}")
    frame_len, hop = frame_params(model.sample_rate, model.frame_ms, model.overlap)
    pad = frame_len - hop
    padded = Waveform(
        samples=np.concatenate([np.zeros(pad), mixture.samples, np.zeros(pad)]),
        sample_rate=mixture.sample_rate,
    )
    spec = stft(padded, model.frame_ms, model.overlap)
    v = embed(model.net, spec)
    if strategy == "e1":
        if model.fixed_attractors is None:
            raise ArtifactMismatchError(
                "model bundle carries no fixed attractors (train with the danet head)"
            )
        if model.fixed_attractors.shape[0] != k:
            raise ArtifactMismatchError(
                f"fixed attractors support k={model.fixed_attractors.shape[0]}, requested {k}"
            )
        masks = danet_masks(v, AttractorSet(model.fixed_attractors, "fixed"))
    else:
        metric = {"e2-euclid": "euclidean", "e2-spherical": "spherical"}.get(
            strategy, model.metric
        )
        weights = flatten_tf(spec.magnitude**2)
        if model.cluster_top_energy_only:
            weights = weights * energy_topfrac_indicator(spec, model.energy_fraction)
        ccfg = ClusterConfig(
            k=k,
            metric=metric,
            iterations=inference_iters,
            weighting=model.weighting,
            seed=model.seed,
            weight_final_recompute=model.weight_final_recompute,
        )
        if strategy == "unfolded":
            centroids = unfolded_kmeans_layer(v, weights, ccfg)
        else:
            state = kmeans(v.data, ccfg, weights=weights)
            centroids = dc.constant(state.centroids)
        masks = kmeans_masks(v, centroids, metric, model.temperature)
    t_len, f_len = spec.shape
    parts = apply_mask(spec, masks_to_maskset(masks.data, t_len, f_len))
    outputs = []
    for part in parts:
        w = istft(part)
        samples = np.zeros(len(mixture.samples))
        n = min(len(samples), len(w.samples) - pad)
        samples[:n] = w.samples[pad : pad + n]
        outputs.append(Waveform(samples=samples, sample_rate=mixture.sample_rate))
    return outputs


def evaluate(model: TrainedModel, examples: list, strategy: str,
             inference_iters: int = 20):
    """Mean SI-SDR improvement over (mixture, sources) pairs.

    Returns (mean_si_sdri_db, per-example SeparationScore list).
    """
    if not examples:
        raise InvalidInputError("no examples to evaluate")
    scores = []
    for mix_w, src_ws in examples:
        estimates = separate(model, mix_w, k=len(src_ws), strategy=strategy,
                             inference_iters=inference_iters)
        scores.append(si_sdri(estimates, src_ws, mix_w))
    return float(np.mean([s.si_sdri_db for s in scores])), scores


def write_metrics_log(log: list, path) -> None:
    """Training log as CSV: epoch, train_loss, val_si_sdri, lr."""
    lines = ["epoch,train_loss,val_si_sdri,lr"]
    for row in log:
        lines.append(
            f"{row['epoch']},{row['train_loss']:.8f},{row['val_si_sdri']:.6f},{row['lr']:.8g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(model: TrainedModel, path) -> None:
    """Single-file checkpoint: magic, length-prefixed JSON header, then
    little-endian float64 parameter blobs at the header's offsets."""
    blobs = []
    params_meta = []
    offset = 0
    for name, p in model.net.param_items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        params_meta.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    fixed_meta = None
    if model.fixed_attractors is not None:
        arr = np.ascontiguousarray(model.fixed_attractors, dtype="<f8")
        fixed_meta = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {
        "format_version": _CKPT_VERSION,
        "flattening": _FLATTENING,
        "net": asdict(model.net.cfg),
        "head": model.head,
        "metric": model.metric,
        "l_unfold": model.l_unfold,
        "k": model.k,
        "sample_rate": model.sample_rate,
        "frame_ms": model.frame_ms,
        "overlap": model.overlap,
        "temperature": model.temperature,
        "weighting": model.weighting,
        "energy_fraction": model.energy_fraction,
        "weight_final_recompute": model.weight_final_recompute,
        "cluster_top_energy_only": model.cluster_top_energy_only,
        "seed": model.seed,
        "params": params_meta,
        "fixed_attractors": fixed_meta,
        "blob_bytes": offset,
    }
    encoded = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> TrainedModel:
    """Rebuild a TrainedModel; any structural mismatch is an error."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ArtifactMismatchError(f"{path} is not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != _CKPT_VERSION:
        raise ArtifactMismatchError(
            f"unsupported checkpoint version {header.get('format_version')}"
        )
    blob = raw[16 + hlen :]
    if len(blob) != header["blob_bytes"]:
        raise ArtifactMismatchError("checkpoint blob length does not match header")
    net = EmbeddingNetwork(NetConfig(**header["net"]))
    seen = set()
    for meta in header["params"]:
        name = meta["name"]
        if name not in net.params:
            raise ArtifactMismatchError(f"checkpoint parameter {name} unknown to architecture")
        shape = tuple(meta["shape"])
        if net.params[name].data.shape != shape:
            raise ArtifactMismatchError(
                f"parameter {name} shape {shape} does not match architecture"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=meta["offset"])
        net.params[name] = dc.parameter(arr.reshape(shape).astype(np.float64))
        seen.add(name)
    missing = set(net.params) - seen
    if missing:
        raise ArtifactMismatchError(f"checkpoint is missing parameters {sorted(missing)}")
    fixed = None
    if header["fixed_attractors"] is not None:
        meta = header["fixed_attractors"]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        fixed = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=meta["offset"])
            .reshape(shape)
            .astype(np.float64)
        )
    return TrainedModel(
        net=net,
        head=header["head"],
        metric=header["metric"],
        l_unfold=header["l_unfold"],
        k=header["k"],
        sample_rate=header["sample_rate"],
        frame_ms=header["frame_ms"],
        overlap=header["overlap"],
        temperature=header["temperature"],
        weighting=header["weighting"],
        energy_fraction=header["energy_fraction"],
        weight_final_recompute=header["weight_final_recompute"],
        cluster_top_energy_only=header["cluster_top_energy_only"],
        seed=header["seed"],
        fixed_attractors=fixed,
    )
