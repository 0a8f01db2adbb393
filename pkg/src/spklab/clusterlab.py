"""K-means clustering and the joint two-modality embedding.

Lloyd iterations with greedy ++ seeding, several seeded restarts, and a
repair step that keeps every cluster populated by donating the farthest
member of the largest cluster.  Inertia never increases within a restart,
and the returned assignment is a fixed point of one more Lloyd step.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyInput,
    InvalidConfig,
    LengthMismatch,
    TooFewDistinctPoints,
    ZeroVector,
)
from .numkit import Rng


@dataclass(eq=False)
class KmeansResult:
    assignments: np.ndarray      # (N,) int cluster ids in [0, k)
    centroids: np.ndarray        # (k, d)
    inertia: float               # sum of squared distances to assigned centroid
    inertia_trace: list          # per-iteration inertia of the winning restart


def _dist2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared euclidean distances, (N, k), clipped at zero for fp safety."""
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _pp_init(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """Greedy ++ seeding: each next centroid drawn proportional to D^2."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    d2 = _dist2(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining mass is zero: all points coincide with chosen centroids
            idx = int(rng.integers(0, n))
        else:
            u = rng.uniform(0.0, 1.0) * total
            idx = int(np.searchsorted(np.cumsum(d2), u))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, _dist2(points, centroids[j:j + 1]).ravel())
    return centroids


def _repair_empty(assign: np.ndarray, points: np.ndarray,
                  centroids: np.ndarray, k: int) -> np.ndarray:
    """Give each empty cluster the farthest member of the largest cluster.

    The moved point becomes a singleton whose centroid lands on it, so its
    inertia contribution drops to zero and total inertia cannot increase.
    """
    assign = assign.copy()
    counts = np.bincount(assign, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        members = np.flatnonzero(assign == donor)
        gaps = ((points[members] - centroids[donor]) ** 2).sum(axis=1)
        moved = members[int(np.argmax(gaps))]
        assign[moved] = empty
        counts[donor] -= 1
        counts[empty] += 1
    return assign


def kmeans(points, k: int, rng: Rng, restarts: int = 4,
           max_iters: int = 200) -> KmeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise EmptyInput(f"need a non-empty (N, d) array, got {points.shape}")
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")
    if restarts < 1 or max_iters < 1:
        raise InvalidConfig("restarts and max_iters must be >= 1")
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct < k:
        raise TooFewDistinctPoints(f"{n_distinct} distinct points < k={k}")

    best = None
    for r in range(restarts):
        centroids = _pp_init(points, k, rng.child("init", r))
        trace = []
        prev = None
        for _ in range(max_iters):
            d2 = _dist2(points, centroids)
            assign = d2.argmin(axis=1)
            assign = _repair_empty(assign, points, centroids, k)
            trace.append(float(d2[np.arange(points.shape[0]), assign].sum()))
            if prev is not None and np.array_equal(assign, prev):
                break
            prev = assign
            for j in range(k):
                centroids[j] = points[assign == j].mean(axis=0)
        inertia = float(
            _dist2(points, centroids)[np.arange(points.shape[0]), assign].sum()
        )
        if best is None or inertia < best.inertia:
            best = KmeansResult(assign, centroids.copy(), inertia, trace)
    return best


def members_by_cluster(assignments: np.ndarray, k: int) -> list:
    """Index lists per cluster id; empty clusters give empty lists."""
    return [np.flatnonzero(assignments == j).tolist() for j in range(k)]


def joint_embed(audio_emb, visual_emb) -> np.ndarray:
    """Concatenate per-modality l2-normalized embeddings row-wise.

    Each half has unit norm, so the cosine between two joint rows is the
    mean of the per-modality cosines.
    """
    a = np.asarray(audio_emb, dtype=np.float64)
    v = np.asarray(visual_emb, dtype=np.float64)
    if a.ndim != 2 or v.ndim != 2:
        raise EmptyInput("joint_embed expects 2-D (N, d) arrays")
    if a.shape[0] != v.shape[0]:
        raise LengthMismatch(f"{a.shape[0]} audio rows vs {v.shape[0]} visual rows")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nv == 0.0):
        raise ZeroVector("zero row in joint embedding input")
    return np.concatenate([a / na, v / nv], axis=1)
