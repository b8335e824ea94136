"""Euclidean and spherical k-means, weighted updates, and a differentiable
unfolded clustering layer.

The plain ``kmeans`` and the tape-recorded ``unfolded_kmeans_layer`` share
every piece of arithmetic (initialization, assignment, selection matrices,
normalization), so their forward passes agree bitwise for the same seed and
config. The unfolded layer treats assignments as constants; gradients flow
only through the centroid update steps.

Spherical mode follows the normalized-point algorithm: points are unit
normalized, assignment uses cosine similarity, intermediate centroids are
renormalized after every update, and the final centroids are recomputed
from the original un-normalized points under the last assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import EPS, Tensor
from .errors import DegenerateInputError, DimensionError, InvalidInputError

_METRICS = ("euclidean", "spherical")
_WEIGHTINGS = ("uniform", "energy")
_PROVENANCES = ("ground_truth", "kmeans", "fixed")


@dataclass
class ClusterConfig:
    """Settings for one clustering run.

    Attributes:
        k: cluster count, >= 1.
        metric: "euclidean" or "spherical" (cosine similarity on
            unit-normalized points).
        iterations: assignment/update pairs L, >= 1.
        weighting: "uniform" or "energy"; energy mode expects per-point
            weights (squared bin magnitudes) passed alongside the points.
        seed: initialization seed.
        convergence_tol: optional centroid-shift early-stop threshold for
            plain k-means; 0 stops only when assignments repeat. Nonzero
            values trade the bitwise match with the unfolded layer for
            speed.
        kmeanspp: distance-weighted seeding instead of uniform sampling.
        weight_final_recompute: whether the spherical final recomputation
            from un-normalized points reuses the point weights (True) or
            is a plain mean (False).
    """

    k: int
    metric: str = "euclidean"
    iterations: int = 20
    weighting: str = "uniform"
    seed: int = 0
    convergence_tol: float = 0.0
    kmeanspp: bool = False
    weight_final_recompute: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.iterations < 1:
            raise InvalidInputError(f"iterations must be >= 1, got {self.iterations}")
        if self.metric not in _METRICS:
            raise InvalidInputError(f"metric must be one of {_METRICS}")
        if self.weighting not in _WEIGHTINGS:
            raise InvalidInputError(f"weighting must be one of {_WEIGHTINGS}")


@dataclass
class ClusterState:
    """Result of a clustering run."""

    centroids: np.ndarray
    assignments: np.ndarray
    weights: np.ndarray
    objective_trace: list = field(default_factory=list)


@dataclass
class AttractorSet:
    """k attractor vectors in embedding space."""

    vectors: np.ndarray
    provenance: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DimensionError(
                f"attractors must be a (k, D) array, got shape {self.vectors.shape}"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("attractor vectors must be finite")
        if self.provenance not in _PROVENANCES:
            raise InvalidInputError(f"provenance must be one of {_PROVENANCES}")

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm, eps-guarded for zero rows."""
    norms = np.sqrt((x * x).sum(axis=1))
    return x / (norms + EPS)[:, None]


def assign_euclidean(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties to the lowest index."""
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def assign_spherical(points_normalized: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar centroid; ties to the lowest index."""
    sims = points_normalized @ centroids.T
    return sims.argmax(axis=1)


def selection_matrix(assignments: np.ndarray, weights: np.ndarray, k: int):
    """Row-normalized weighted selection matrix S (k x n) with S @ points
    giving the weighted cluster means.

    Returns:
        (S, totals) where totals are per-cluster weight sums.

    Raises:
        DegenerateInputError: if any cluster has zero total weight.
    """
    n = assignments.shape[0]
    w = np.zeros((k, n))
    w[assignments, np.arange(n)] = weights
    totals = w.sum(axis=1)
    if np.any(totals <= 0.0):
        bad = int(np.flatnonzero(totals <= 0.0)[0])
        raise DegenerateInputError(f"cluster {bad} has zero total weight")
    return w / totals[:, None], totals


def update_weighted(
    points: np.ndarray,
    assignments: np.ndarray,
    weights: np.ndarray,
    k: int,
    spherical: bool = False,
) -> np.ndarray:
    """Per-cluster weighted means; spherical mode renormalizes to unit norm."""
    s, _ = selection_matrix(assignments, weights, k)
    centroids = s @ points
    if spherical:
        centroids = normalize_rows(centroids)
    return centroids


def _fix_empty_clusters(
    work: np.ndarray,
    assignments: np.ndarray,
    weights: np.ndarray,
    prev_centroids: np.ndarray,
    k: int,
    spherical: bool,
) -> np.ndarray:
    """Re-seed zero-weight clusters deterministically.

    Each empty cluster (lowest index first) takes the positive-weight point
    with the largest weighted distance to the centroid it was assigned to,
    preferring points whose cluster keeps at least one other member.
    """
    a = assignments.copy()
    if spherical:
        cbar = normalize_rows(prev_centroids)
        dist = 1.0 - (work * cbar[a]).sum(axis=1)
    else:
        diff = work - prev_centroids[a]
        dist = (diff * diff).sum(axis=1)
    for _ in range(k):
        totals = np.bincount(a, weights=weights, minlength=k)
        empty = np.flatnonzero(totals <= 0.0)
        if empty.size == 0:
            return a
        counts = np.bincount(a, minlength=k)
        eligible = (weights > 0) & (counts[a] >= 2) & (totals[a] > 0)
        if not eligible.any():
            eligible = weights > 0
        if not eligible.any():
            raise DegenerateInputError("all point weights are zero")
        scores = np.where(eligible, weights * dist, -1.0)
        a[int(np.argmax(scores))] = int(empty[0])
    totals = np.bincount(a, weights=weights, minlength=k)
    if np.any(totals <= 0.0):
        raise DegenerateInputError("could not re-seed empty clusters")
    return a


def _initial_centroids(
    work: np.ndarray, cfg: ClusterConfig, weights: np.ndarray
) -> np.ndarray:
    """Seeded pick of k distinct rows of the working points."""
    rng = np.random.default_rng(cfg.seed)
    n = work.shape[0]
    if n < cfg.k:
        raise DegenerateInputError(f"need at least k={cfg.k} points, got {n}")
    if cfg.kmeanspp:
        return _kmeanspp_centroids(work, cfg, weights, rng)
    chosen: list = []
    for i in rng.permutation(n):
        row = work[i]
        if any(np.array_equal(row, c) for c in chosen):
            continue
        chosen.append(row)
        if len(chosen) == cfg.k:
            return np.array(chosen)
    raise DegenerateInputError(
        f"fewer than k={cfg.k} distinct points available for initialization"
    )


def _kmeanspp_centroids(work, cfg, weights, rng) -> np.ndarray:
    n = work.shape[0]
    chosen = [work[int(rng.integers(n))]]
    for _ in range(1, cfg.k):
        d2 = np.min(
            [((work - c) ** 2).sum(axis=1) for c in chosen], axis=0
        )
        p = weights * d2
        total = p.sum()
        if total <= 0.0:
            raise DegenerateInputError(
                f"fewer than k={cfg.k} distinct points available for initialization"
            )
        chosen.append(work[int(rng.choice(n, p=p / total))])
    return np.array(chosen)


def _effective_weights(cfg: ClusterConfig, weights, n: int) -> np.ndarray:
    if cfg.weighting == "uniform" or weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise DimensionError(f"weights must have shape ({n},), got {weights.shape}")
    if np.any(weights < 0):
        raise InvalidInputError("weights must be nonnegative")
    return weights


def _objective(work, centroids, assignments, weights, spherical) -> float:
    if spherical:
        cbar = normalize_rows(centroids)
        return float(np.sum(weights * (work * cbar[assignments]).sum(axis=1)))
    diff = work - centroids[assignments]
    return float(np.sum(weights * (diff * diff).sum(axis=1)))


def kmeans(
    points: np.ndarray,
    cfg: ClusterConfig,
    weights=None,
    init_centroids=None,
) -> ClusterState:
    """Weighted k-means in the configured metric.

    Runs up to cfg.iterations assignment/update pairs, stopping early when
    assignments repeat (or when centroids move less than convergence_tol).
    Spherical mode clusters unit-normalized points and finally recomputes
    centroids from the original un-normalized points under the last
    assignment.

    Args:
        points: (n, D) array.
        cfg: clustering settings.
        weights: optional (n,) nonnegative weights, used when
            cfg.weighting == "energy".
        init_centroids: optional explicit (k, D) start, overriding seeded
            sampling; rows must live in the working space (normalized for
            spherical mode).

    Returns:
        ClusterState; objective_trace holds the per-iteration objective
        (weighted SSE for Euclidean, weighted cosine sum before the final
        recompute for spherical).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"points must be (n, D), got shape {points.shape}")
    spherical = cfg.metric == "spherical"
    w = _effective_weights(cfg, weights, points.shape[0])
    if w.sum() <= 0.0:
        raise DegenerateInputError("all point weights are zero")
    work = normalize_rows(points) if spherical else points
    if init_centroids is None:
        centroids = _initial_centroids(work, cfg, w)
    else:
        centroids = np.asarray(init_centroids, dtype=np.float64)
    assignments = None
    trace = []
    for _ in range(cfg.iterations):
        a = _assign(work, centroids, spherical)
        a = _fix_empty_clusters(work, a, w, centroids, cfg.k, spherical)
        if assignments is not None and np.array_equal(a, assignments):
            break
        assignments = a
        prev_centroids = centroids
        centroids = update_weighted(work, a, w, cfg.k, spherical=spherical)
        trace.append(_objective(work, centroids, assignments, w, spherical))
        if cfg.convergence_tol > 0.0:
            shift = np.max(np.abs(centroids - prev_centroids))
            if shift <= cfg.convergence_tol:
                break
    if spherical:
        w_final = w if cfg.weight_final_recompute else np.ones_like(w)
        s_final, _ = selection_matrix(assignments, w_final, cfg.k)
        centroids = s_final @ points
    return ClusterState(
        centroids=centroids,
        assignments=assignments,
        weights=w,
        objective_trace=trace,
    )


def _assign(work, centroids, spherical):
    if spherical:
        return assign_spherical(work, centroids)
    return assign_euclidean(work, centroids)


def unfolded_kmeans_layer(
    v: Tensor,
    weights,
    cfg: ClusterConfig,
    init_centroids=None,
    trace=None,
) -> Tensor:
    """k-means unrolled into the differentiation graph.

    Executes exactly cfg.iterations assignment/update pairs (no early stop:
    the graph shape must not depend on convergence). Assignments enter the
    graph only as constant selection matrices, so gradients flow through
    the centroid updates alone. The forward result equals plain ``kmeans``
    with the same seed and config, bitwise.

    Args:
        v: (n, D) embedding tensor, typically attached to a tape.
        weights: optional (n,) nonnegative weights (energy weighting).
        cfg: clustering settings.
        init_centroids: optional explicit start, as in ``kmeans``.
        trace: optional list; when given, one dict per iteration with the
            assignment vector and its decision margin is appended.

    Returns:
        (k, D) centroid tensor on the tape.
    """
    spherical = cfg.metric == "spherical"
    w = _effective_weights(cfg, weights, v.data.shape[0])
    if w.sum() <= 0.0:
        raise DegenerateInputError("all point weights are zero")
    work_t = dc.div_rows(v, dc.l2_norm_rows(v)) if spherical else v
    if init_centroids is None:
        centroids = _initial_centroids(work_t.data, cfg, w)
    else:
        centroids = np.asarray(init_centroids, dtype=np.float64)
    assignments = None
    for _ in range(cfg.iterations):
        a = _assign(work_t.data, centroids, spherical)
        a = _fix_empty_clusters(work_t.data, a, w, centroids, cfg.k, spherical)
        if trace is not None:
            trace.append(
                {
                    "assignments": a,
                    "margin": assignment_margin(work_t.data, centroids, cfg.metric),
                }
            )
        assignments = a
        s, _ = selection_matrix(a, w, cfg.k)
        c_t = dc.matmul(dc.constant(s), work_t)
        if spherical:
            c_t = dc.div_rows(c_t, dc.l2_norm_rows(c_t))
        centroids = c_t.data
    if spherical:
        w_final = w if cfg.weight_final_recompute else np.ones_like(w)
        s_final, _ = selection_matrix(assignments, w_final, cfg.k)
        c_t = dc.matmul(dc.constant(s_final), v)
    return c_t


def assignment_margin(work: np.ndarray, centroids: np.ndarray, metric: str) -> float:
    """Smallest gap between best and second-best assignment score.

    A large margin guarantees small input perturbations cannot flip any
    assignment, which finite-difference checks rely on. Returns +inf for
    k = 1.
    """
    if centroids.shape[0] < 2:
        return np.inf
    if metric == "spherical":
        sims = np.sort(work @ centroids.T, axis=1)
        return float(np.min(sims[:, -1] - sims[:, -2]))
    d2 = np.sort(((work[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
    return float(np.min(d2[:, 1] - d2[:, 0]))


def mean_cosine_distance(
    points: np.ndarray,
    centroids: np.ndarray,
    assignments: np.ndarray,
    weights=None,
) -> float:
    """Weighted mean of 1 - cos(point, assigned centroid)."""
    pbar = normalize_rows(np.asarray(points, dtype=np.float64))
    cbar = normalize_rows(np.asarray(centroids, dtype=np.float64))
    cos = (pbar * cbar[assignments]).sum(axis=1)
    if weights is None:
        return float(np.mean(1.0 - cos))
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.sum(weights * (1.0 - cos)) / np.sum(weights))


def fixed_attractors_from_training(history: list, k: int) -> AttractorSet:
    """Cluster all recorded training attractors into k fixed attractors.

    Args:
        history: nonempty list of AttractorSet or (k, D) arrays recorded
            across training.
        k: number of fixed attractors to produce.

    Returns:
        AttractorSet with provenance "fixed".
    """
    if not history:
        raise InvalidInputError("attractor history is empty")
    stacked = np.concatenate(
        [h.vectors if isinstance(h, AttractorSet) else np.asarray(h) for h in history],
        axis=0,
    )
    if stacked.shape[0] < k:
        raise DegenerateInputError(
            f"history holds {stacked.shape[0]} attractors, need at least {k}"
        )
    cfg = ClusterConfig(k=k, metric="euclidean", iterations=100, seed=0)
    state = kmeans(stacked, cfg)
    return AttractorSet(vectors=state.centroids, provenance="fixed")
