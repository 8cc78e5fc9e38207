"""k-means over embeddings for proxy subgroups, plus a cluster-vs-attribute report."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)  # inertia after each assignment step


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total == 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centroids)


def _lloyd(x, centroids, max_iters, tol):
    history = []
    labels = None
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), labels].sum()))
        new = centroids.copy()
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        # an empty cluster is reseeded at the point farthest from its centroid
        for j in np.setdiff1d(np.arange(len(centroids)), labels):
            far = int(_sq_dists(x, new)[np.arange(len(x)), labels].argmax())
            new[j] = x[far]
            labels[far] = j
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return ClusterAssignment(labels, centroids, inertia, it, history)


def kmeans(embeddings, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-8,
           n_init: int = 10) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia of ``n_init`` runs wins."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, kmeans_plusplus(x, k, rng), max_iters, tol)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def contingency(clusters, attributes) -> tuple[np.ndarray, list, list]:
    clusters = np.asarray(clusters)
    attributes = np.asarray(attributes)
    c_vals = sorted(set(clusters.tolist()))
    a_vals = sorted(set(attributes.tolist()))
    table = np.zeros((len(c_vals), len(a_vals)), dtype=int)
    ci = {v: i for i, v in enumerate(c_vals)}
    ai = {v: i for i, v in enumerate(a_vals)}
    for c, a in zip(clusters.tolist(), attributes.tolist()):
        table[ci[c], ai[a]] += 1
    return table, c_vals, a_vals


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def normalized_mutual_info(clusters, attributes) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when either labeling has a single value.
    """
    table, _, _ = contingency(clusters, attributes)
    h_c = _entropy(table.sum(axis=1))
    h_a = _entropy(table.sum(axis=0))
    if h_c == 0 or h_a == 0:
        return 0.0
    n = table.sum()
    joint = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n ** 2
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return float(np.clip(mi / ((h_c + h_a) / 2), 0.0, 1.0))


def cluster_report(assignment: ClusterAssignment | np.ndarray, attributes) -> dict:
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    table, c_vals, a_vals = contingency(labels, attributes)
    return {
        "clusters": [int(c) for c in c_vals],
        "categories": [str(a) for a in a_vals],
        "counts": table.tolist(),
        "nmi": normalized_mutual_info(labels, attributes),
    }
