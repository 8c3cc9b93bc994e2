"""Complete-linkage agglomerative clustering under cosine distance.

Cutting the complete-linkage dendrogram at height ``t`` guarantees that no
two members of a cluster are more than ``t`` apart, which is exactly the
intra-cluster constraint we want for author groups.

Cost is O(n^2) memory and O(n^3) time; a few thousand signatures per run is
the intended scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import ClusterAssignment
from .errors import DataError, DegenerateEmbedding, InvalidInput


@dataclass(frozen=True)
class Merge:
    cluster_a: int
    cluster_b: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge sequence with scipy-style ids: leaves 0..n-1, the k-th merge creates n+k."""

    merges: Tuple[Merge, ...]
    n_leaves: int

    def to_linkage(self) -> np.ndarray:
        return np.array([[m.cluster_a, m.cluster_b, m.height, m.size] for m in self.merges], dtype=np.float64)


def _matrix(embeddings) -> np.ndarray:
    vecs = np.stack([np.asarray(getattr(e, "vector", e), dtype=np.float64).reshape(-1) for e in embeddings])
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbedding("cosine distance undefined for a zero vector")
    return vecs / norms[:, None]


def cosine_distance(e1, e2) -> float:
    """1 - cos(e1, e2), clipped to [0, 2]."""
    u = _matrix([e1, e2])
    return float(np.clip(1.0 - np.dot(u[0], u[1]), 0.0, 2.0))


def cosine_distance_matrix(embeddings) -> np.ndarray:
    u = _matrix(embeddings)
    d = np.clip(1.0 - u @ u.T, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def complete_linkage(dist: np.ndarray) -> Dendrogram:
    """Full complete-linkage dendrogram of a symmetric distance matrix.

    A merged cluster keeps the slot of its smaller-indexed side, so a slot
    index is always the smallest leaf index in its cluster. Ties in merge
    height go to the lowest (slot_a, slot_b) pair.
    """
    n = dist.shape[0]
    work = dist.astype(np.float64, copy=True)
    np.fill_diagonal(work, np.inf)
    ids = list(range(n))
    sizes = [1] * n
    merges = []
    for k in range(n - 1):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        h = float(work[i, j])
        merges.append(Merge(min(ids[i], ids[j]), max(ids[i], ids[j]), h, sizes[i] + sizes[j]))
        row = np.maximum(work[i], work[j])
        work[i, :] = row
        work[:, i] = row
        work[i, i] = np.inf
        work[j, :] = np.inf
        work[:, j] = np.inf
        ids[i] = n + k
        sizes[i] += sizes[j]
    return Dendrogram(tuple(merges), n)


def cut(dendrogram: Dendrogram, t: float) -> List[int]:
    """Flat labels (0.. by first appearance) keeping every merge with height <= t."""
    n = dendrogram.n_leaves
    parent = list(range(2 * n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, m in enumerate(dendrogram.merges):
        if m.height > t:
            break  # heights are non-decreasing
        parent[find(m.cluster_a)] = n + k
        parent[find(m.cluster_b)] = n + k
    remap: dict = {}
    return [remap.setdefault(find(i), len(remap)) for i in range(n)]


def cluster(embeddings: Sequence, t: float, ids: Optional[Sequence[str]] = None
            ) -> Tuple[ClusterAssignment, Dendrogram]:
    """Cluster embeddings so every intra-cluster cosine distance is <= t.

    ``ids`` defaults to each embedding's ``signature_id``, falling back to
    its position. Cluster ids follow order of first member appearance.
    """
    embeddings = list(embeddings)
    if not embeddings:
        raise InvalidInput("cannot cluster an empty set")
    if not 0.0 <= t <= 2.0:
        raise InvalidInput("t must lie in [0, 2]")
    if ids is None:
        ids = [getattr(e, "signature_id", "") or str(i) for i, e in enumerate(embeddings)]
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise InvalidInput("signature ids must be unique")
    dendro = complete_linkage(cosine_distance_matrix(embeddings))
    labels = cut(dendro, t)
    return ClusterAssignment(dict(zip(ids, labels)), t), dendro


def _pair_distances(embeddings, labeled_pairs) -> Tuple[np.ndarray, np.ndarray]:
    u = _matrix(embeddings)
    pairs = np.asarray([(int(i), int(j)) for i, j, _ in labeled_pairs], dtype=np.int64)
    y = np.asarray([int(lab) for _, _, lab in labeled_pairs], dtype=np.int64)
    d = np.clip(1.0 - np.einsum("ij,ij->i", u[pairs[:, 0]], u[pairs[:, 1]]), 0.0, 2.0)
    return d, y


def f1_at(d: np.ndarray, y: np.ndarray, t: float) -> float:
    pred = d <= t
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


THRESHOLD_GRID = np.round(np.arange(201) * 0.01, 2)


def select_threshold(embeddings: Sequence, labeled_pairs: Sequence[Tuple[int, int, int]]) -> float:
    """Grid t in {0.00, 0.01, ..., 2.00} maximising pairwise F1; smallest t wins ties.

    ``labeled_pairs`` holds (i, j, same_author) with indices into ``embeddings``;
    a pair is predicted same-author when its distance is <= t.
    """
    labeled_pairs = list(labeled_pairs)
    if not labeled_pairs:
        raise DataError("threshold selection needs labelled pairs")
    d, y = _pair_distances(list(embeddings), labeled_pairs)
    scores = [f1_at(d, y, t) for t in THRESHOLD_GRID]
    return float(THRESHOLD_GRID[int(np.argmax(scores))])
