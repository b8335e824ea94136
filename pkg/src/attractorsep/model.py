"""Embedding network, attractors, mask heads, and training losses.

The network maps a magnitude spectrogram (T, F) to embeddings V with one
D-dimensional row per T-F bin, flattened time-major (row i = t*F + f).
Attractors are points in embedding space; masks come from per-bin softmax
over attractor or centroid affinities. Losses compare masked mixture
magnitudes against source magnitudes.

Recurrent layers are fused tape ops: the whole layer is one node with a
vectorized forward and a hand-written backprop-through-time backward,
which keeps tape overhead independent of sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.special import expit as _sigmoid

from . import diffcore as dc
from . import dsp
from .clustering import AttractorSet
from .diffcore import Tensor
from .errors import (
    DegenerateBatchError,
    DimensionError,
    InvalidInputError,
    NotSupportedError,
)

_CELLS = ("gru", "tanh")

PIT_MAX_SOURCES = 6


@dataclass
class NetConfig:
    """Embedding network architecture.

    Attributes:
        input_dim: frequency bins F per frame.
        embedding_dim: embedding width D.
        hidden: encoder/decoder fully-connected width.
        recurrent_layers: bidirectional recurrent layer count (0 allowed,
            giving a frame-wise encoder-decoder network).
        recurrent_units: hidden units per direction.
        cell: "gru" (gated) or "tanh" (vanilla).
        seed: weight initialization seed.
    """

    input_dim: int
    embedding_dim: int = 8
    hidden: int = 128
    recurrent_layers: int = 2
    recurrent_units: int = 64
    cell: str = "gru"
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.embedding_dim, self.hidden) < 1:
            raise InvalidInputError("network dimensions must be positive")
        if self.recurrent_layers < 0 or (
            self.recurrent_layers > 0 and self.recurrent_units < 1
        ):
            raise InvalidInputError("invalid recurrent layer settings")
        if self.cell not in _CELLS:
            raise InvalidInputError(f"cell must be one of {_CELLS}")


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, shape)


def gru_layer(x: Tensor, wx: Tensor, bx: Tensor, uzr: Tensor, uh: Tensor, reverse: bool) -> Tensor:
    """One direction of a gated recurrent layer as a single fused tape op.

    Gates: z = sig(x Wz + h Uz), r = sig(x Wr + h Ur),
    candidate c = tanh(x Wh + (r*h) Uh), h' = h + z*(c - h).
    Wz/Wr/Wh are the column blocks of wx; Uz/Ur the blocks of uzr.
    """
    xd, wxd, bxd, uzrd, uhd = x.data, wx.data, bx.data, uzr.data, uh.data
    t_len = xd.shape[0]
    u = uhd.shape[0]
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    xp = xd @ wxd + bxd
    out = np.empty((t_len, u))
    h_prev = np.empty((t_len, u))
    zs = np.empty((t_len, u))
    rs = np.empty((t_len, u))
    cs = np.empty((t_len, u))
    qs = np.empty((t_len, u))
    h = np.zeros(u)
    for t in order:
        hu = h @ uzrd
        z = _sigmoid(xp[t, :u] + hu[:u])
        r = _sigmoid(xp[t, u : 2 * u] + hu[u:])
        q = r * h
        c = np.tanh(xp[t, 2 * u :] + q @ uhd)
        h_prev[t], zs[t], rs[t], cs[t], qs[t] = h, z, r, c, q
        h = h + z * (c - h)
        out[t] = h

    def backward(g):
        dxp = np.empty((t_len, 3 * u))
        da_all = np.empty((t_len, u))
        dh = np.zeros(u)
        for t in reversed(list(order)):
            dh = dh + g[t]
            dz = dh * (cs[t] - h_prev[t])
            dc_ = dh * zs[t]
            dh_prev = dh * (1.0 - zs[t])
            da = dc_ * (1.0 - cs[t] * cs[t])
            da_all[t] = da
            dq = da @ uhd.T
            dr = dq * h_prev[t]
            dh_prev = dh_prev + dq * rs[t]
            dpz = dz * zs[t] * (1.0 - zs[t])
            dpr = dr * rs[t] * (1.0 - rs[t])
            dxp[t, :u] = dpz
            dxp[t, u : 2 * u] = dpr
            dxp[t, 2 * u :] = da
            dh = dh_prev + np.concatenate([dpz, dpr]) @ uzrd.T
        dc.accumulate_grad(x, dxp @ wxd.T)
        dc.accumulate_grad(wx, xd.T @ dxp)
        dc.accumulate_grad(bx, dxp.sum(axis=0))
        dc.accumulate_grad(uzr, h_prev.T @ dxp[:, : 2 * u])
        dc.accumulate_grad(uh, qs.T @ da_all)

    return dc.custom_op(out, (x, wx, bx, uzr, uh), backward)


def tanh_rnn_layer(x: Tensor, wx: Tensor, bx: Tensor, uh: Tensor, reverse: bool) -> Tensor:
    """One direction of a vanilla recurrent layer: h' = tanh(x Wx + b + h Uh)."""
    xd, wxd, bxd, uhd = x.data, wx.data, bx.data, uh.data
    t_len = xd.shape[0]
    u = uhd.shape[0]
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    xp = xd @ wxd + bxd
    out = np.empty((t_len, u))
    h_prev = np.empty((t_len, u))
    h = np.zeros(u)
    for t in order:
        h_prev[t] = h
        h = np.tanh(xp[t] + h @ uhd)
        out[t] = h

    def backward(g):
        dxp = np.empty((t_len, u))
        dh = np.zeros(u)
        for t in reversed(list(order)):
            da = (dh + g[t]) * (1.0 - out[t] * out[t])
            dxp[t] = da
            dh = da @ uhd.T
        dc.accumulate_grad(x, dxp @ wxd.T)
        dc.accumulate_grad(wx, xd.T @ dxp)
        dc.accumulate_grad(bx, dxp.sum(axis=0))
        dc.accumulate_grad(uh, h_prev.T @ dxp)

    return dc.custom_op(out, (x, wx, bx, uh), backward)


class EmbeddingNetwork:
    """Frame encoder, bidirectional recurrent core, and per-bin embedding head."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.params: dict = {}
        rng = np.random.default_rng(cfg.seed)
        h, u = cfg.hidden, cfg.recurrent_units
        self._add(rng, "enc0_w", cfg.input_dim, (cfg.input_dim, h))
        self._add(rng, "enc0_b", cfg.input_dim, (h,), zero=True)
        self._add(rng, "enc1_w", h, (h, h))
        self._add(rng, "enc1_b", h, (h,), zero=True)
        c_in = h
        for i in range(cfg.recurrent_layers):
            for d in ("f", "b"):
                gate_mult = 3 if cfg.cell == "gru" else 1
                self._add(rng, f"rnn{i}_{d}_wx", c_in, (c_in, gate_mult * u))
                self._add(rng, f"rnn{i}_{d}_bx", c_in, (gate_mult * u,), zero=True)
                if cfg.cell == "gru":
                    self._add(rng, f"rnn{i}_{d}_uzr", u, (u, 2 * u))
                self._add(rng, f"rnn{i}_{d}_uh", u, (u, u))
            c_in = 2 * u
        self._add(rng, "dec0_w", c_in, (c_in, h))
        self._add(rng, "dec0_b", c_in, (h,), zero=True)
        out_dim = cfg.input_dim * cfg.embedding_dim
        self._add(rng, "dec1_w", h, (h, out_dim))
        self._add(rng, "dec1_b", h, (out_dim,), zero=True)

    def _add(self, rng, name, fan_in, shape, zero=False):
        data = np.zeros(shape) if zero else _uniform(rng, fan_in, shape)
        self.params[name] = dc.parameter(data)

    def param_items(self):
        """Parameters in name order; the deterministic iteration order for
        optimizers and checkpoints."""
        return sorted(self.params.items())

    def num_params(self) -> int:
        return sum(p.data.size for _, p in self.param_items())

    def zero_grads(self):
        for _, p in self.param_items():
            p.zero_grad()

    def forward(self, frames: np.ndarray) -> Tensor:
        """Embedding tensor (T*F, D) for scaled input frames (T, F)."""
        if frames.ndim != 2 or frames.shape[1] != self.cfg.input_dim:
            raise DimensionError(
                f"expected (T, {self.cfg.input_dim}) input, got {frames.shape}"
            )
        p = self.params
        t_len = frames.shape[0]
        h = dc.tanh(dc.add_rowvec(dc.matmul(dc.constant(frames), p["enc0_w"]), p["enc0_b"]))
        h = dc.tanh(dc.add_rowvec(dc.matmul(h, p["enc1_w"]), p["enc1_b"]))
        for i in range(self.cfg.recurrent_layers):
            if self.cfg.cell == "gru":
                fwd = gru_layer(
                    h, p[f"rnn{i}_f_wx"], p[f"rnn{i}_f_bx"], p[f"rnn{i}_f_uzr"],
                    p[f"rnn{i}_f_uh"], reverse=False,
                )
                bwd = gru_layer(
                    h, p[f"rnn{i}_b_wx"], p[f"rnn{i}_b_bx"], p[f"rnn{i}_b_uzr"],
                    p[f"rnn{i}_b_uh"], reverse=True,
                )
            else:
                fwd = tanh_rnn_layer(
                    h, p[f"rnn{i}_f_wx"], p[f"rnn{i}_f_bx"], p[f"rnn{i}_f_uh"],
                    reverse=False,
                )
                bwd = tanh_rnn_layer(
                    h, p[f"rnn{i}_b_wx"], p[f"rnn{i}_b_bx"], p[f"rnn{i}_b_uh"],
                    reverse=True,
                )
            h = dc.concat_cols(fwd, bwd)
        h = dc.tanh(dc.add_rowvec(dc.matmul(h, p["dec0_w"]), p["dec0_b"]))
        out = dc.add_rowvec(dc.matmul(h, p["dec1_w"]), p["dec1_b"])
        return dc.reshape(out, (t_len * self.cfg.input_dim, self.cfg.embedding_dim))


def scale_input(magnitude: np.ndarray) -> np.ndarray:
    """Magnitude scaled by its utterance-wise maximum (1 for silence)."""
    peak = magnitude.max()
    return magnitude / (peak if peak > 0 else 1.0)


def embed(net: EmbeddingNetwork, x: dsp.Spectrogram) -> Tensor:
    """Embeddings (T*F, D) for a spectrogram, input max-scaled."""
    if not np.all(np.isfinite(x.magnitude)):
        raise InvalidInputError("spectrogram magnitude must be finite")
    return net.forward(scale_input(x.magnitude))


@dataclass
class DominanceIndicators:
    """Per-speaker dominance (u, one row per speaker) and the top-energy
    bin indicator (e), both over flattened T-F bins."""

    u: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=bool)
        self.e = np.asarray(self.e, dtype=bool)
        if self.u.ndim != 2 or self.e.shape != (self.u.shape[1],):
            raise DimensionError("u must be (k, TF) and e (TF,)")
        if not np.all(self.u.sum(axis=0) == 1):
            raise InvalidInputError("each bin must be dominated by exactly one speaker")


def dominance(sources: list) -> np.ndarray:
    """Boolean (k, TF) matrix: row l marks bins where source l has the
    largest magnitude; ties go to the lowest source index."""
    if not sources:
        raise InvalidInputError("need at least one source")
    shape = sources[0].magnitude.shape
    for s in sources:
        if s.magnitude.shape != shape:
            raise DimensionError("sources must share one spectrogram shape")
    mags = np.stack([dsp.flatten_tf(s.magnitude) for s in sources])
    winner = mags.argmax(axis=0)
    return winner[None, :] == np.arange(len(sources))[:, None]


def dominance_indicators(
    sources: list, mix: dsp.Spectrogram, energy_fraction: float = 0.9
) -> DominanceIndicators:
    """Dominance rows plus the mixture's top-energy indicator."""
    return DominanceIndicators(
        u=dominance(sources),
        e=dsp.energy_topfrac_indicator(mix, energy_fraction),
    )


def ground_truth_attractors(v: Tensor, ind: DominanceIndicators) -> Tensor:
    """Attractors (k, D): mean embedding over each speaker's dominant
    high-energy bins. Differentiable with respect to v."""
    sel = ind.u & ind.e[None, :]
    counts = sel.sum(axis=1)
    if np.any(counts == 0):
        bad = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateBatchError(
            f"speaker {bad} dominates no high-energy bins in this utterance"
        )
    s = sel / counts[:, None]
    return dc.matmul(dc.constant(s), v)


def danet_masks(v: Tensor, attractors) -> Tensor:
    """Masks (TF, k): per-bin softmax over embedding-attractor products."""
    if isinstance(attractors, AttractorSet):
        a_t = dc.constant(attractors.vectors)
    else:
        a_t = attractors
    return dc.softmax_rows(dc.matmul(v, dc.transpose(a_t)))


def kmeans_masks(v: Tensor, centroids: Tensor, metric: str, temperature: float = 1.0) -> Tensor:
    """Masks (TF, k) from centroid affinities.

    Euclidean scores are negated (non-squared) distances; spherical scores
    are raw dot products. An optional temperature divides the scores.
    """
    if metric == "spherical":
        scores = dc.matmul(v, dc.transpose(centroids))
    elif metric == "euclidean":
        cross = dc.smul(dc.matmul(v, dc.transpose(centroids)), -2.0)
        d2 = dc.add_colvec(dc.add_rowvec(cross, dc.sq_norm_rows(centroids)), dc.sq_norm_rows(v))
        scores = dc.smul(dc.sqrt(d2), -1.0)
    else:
        raise InvalidInputError(f"unknown metric {metric!r}")
    if temperature != 1.0:
        scores = dc.smul(scores, 1.0 / temperature)
    return dc.softmax_rows(scores)


def masks_to_maskset(masks: np.ndarray, t: int, f: int) -> dsp.MaskSet:
    """(TF, k) mask matrix to a MaskSet of k (T, F) masks."""
    return dsp.MaskSet(
        [dsp.unflatten_tf(masks[:, l], t, f) for l in range(masks.shape[1])]
    )


def _source_matrix(sources: list, mix: dsp.Spectrogram, k: int) -> np.ndarray:
    if len(sources) != k:
        raise DimensionError(f"{len(sources)} sources for {k} masks")
    for s in sources:
        if s.magnitude.shape != mix.magnitude.shape:
            raise DimensionError("source and mixture shapes differ")
    return np.stack([dsp.flatten_tf(s.magnitude) for s in sources], axis=1)


def mse_loss(sources: list, mix: dsp.Spectrogram, masks: Tensor) -> Tensor:
    """Mean squared error between masked mixture and source magnitudes,
    normalized by k*T*F."""
    k = masks.data.shape[1]
    s_mat = _source_matrix(sources, mix, k)
    x_mat = np.tile(dsp.flatten_tf(mix.magnitude)[:, None], (1, k))
    diff = dc.sub(dc.constant(s_mat), dc.mul(dc.constant(x_mat), masks))
    return dc.smul(dc.sum_(dc.square(diff)), 1.0 / s_mat.size)


def pit_loss(sources: list, mix: dsp.Spectrogram, masks: Tensor):
    """Permutation-invariant MSE: minimum over all source orderings.

    Gradient flows only through the winning permutation's graph branch.

    Returns:
        (loss tensor, permutation p) where mask column l was scored
        against sources[p[l]].
    """
    k = masks.data.shape[1]
    if k > PIT_MAX_SOURCES:
        raise NotSupportedError(
            f"permutation search over {k}! orderings refused (k > {PIT_MAX_SOURCES})"
        )
    s_mat = _source_matrix(sources, mix, k)
    x_flat = dsp.flatten_tf(mix.magnitude)[:, None]
    x_const = dc.constant(x_flat)
    # pair[s][l]: squared error of mask column l against source s
    pair = [[None] * k for _ in range(k)]
    for l in range(k):
        masked = dc.mul(x_const, dc.cols(masks, l, l + 1))
        for s in range(k):
            diff = dc.sub(dc.constant(s_mat[:, s : s + 1]), masked)
            pair[s][l] = dc.sum_(dc.square(diff))
    best_loss, best_perm = None, None
    for perm in permutations(range(k)):
        total = pair[perm[0]][0]
        for l in range(1, k):
            total = dc.add(total, pair[perm[l]][l])
        loss = dc.smul(total, 1.0 / s_mat.size)
        if best_loss is None or loss.data < best_loss.data:
            best_loss, best_perm = loss, perm
    return best_loss, best_perm
