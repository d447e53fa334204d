"""Cluster-conditional Mahalanobis scoring of graph embeddings.

Training embeddings are grouped by k-means, each cluster gets a sample
mean and a regularized population covariance, and a test embedding scores
as the reciprocal of its smallest squared Mahalanobis distance to any
cluster.  High scores mean in-distribution.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class ClusterStats:
    mu: np.ndarray
    cov: np.ndarray  # regularized covariance
    inv: np.ndarray


@dataclass
class MahalanobisScorer:
    stats: list[ClusterStats]
    eps_reg: float
    eps_d: float = 1e-12

    @property
    def q(self) -> int:
        return len(self.stats)


@dataclass
class Decision:
    verdict: str  # "ID" or "OOD"
    score: float
    threshold: float


def _kmeans_pp_init(x, q, rng):
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    for _ in range(q - 1):
        d2 = np.min([np.square(x - c).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
    return np.stack(centers)


def _lloyd(x, q, rng, max_iter=100, tol=1e-8):
    centers = _kmeans_pp_init(x, q, rng)
    labels = np.zeros(len(x), dtype=np.intp)
    for _ in range(max_iter):
        d2 = np.square(x[:, None, :] - centers[None, :, :]).sum(axis=2)
        labels = np.argmin(d2, axis=1)  # ties go to the lowest index
        moved = 0.0
        for k in range(q):
            members = x[labels == k]
            if len(members) == 0:
                continue  # empty cluster keeps its previous center
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centers[k])))
            centers[k] = new
        if moved <= tol:
            break
    return labels, centers


def _compact(labels, centers, keep):
    remap = {}
    kept = []
    for k in range(len(centers)):
        if keep[k]:
            remap[k] = len(kept)
            kept.append(centers[k])
    labels = np.asarray([remap[int(l)] for l in labels], dtype=np.intp)
    return labels, np.stack(kept)


def _merge_small(labels, centers):
    """Fold clusters with fewer than 2 members into their nearest peer."""
    while True:
        counts = np.bincount(labels, minlength=len(centers))
        if np.any(counts == 0):
            labels, centers = _compact(labels, centers, counts > 0)
            continue
        under = np.flatnonzero(counts < 2)
        if len(under) == 0:
            return labels, centers
        small = int(under[0])
        others = [k for k in range(len(centers)) if k != small]
        if not others:
            raise ValueError("cannot estimate a covariance from a single embedding")
        warnings.warn(
            f"cluster {small} has {counts[small]} member(s); merging into nearest cluster"
        )
        dists = [float(np.linalg.norm(centers[small] - centers[k])) for k in others]
        target = others[int(np.argmin(dists))]
        labels[labels == small] = target
        keep = np.ones(len(centers), dtype=bool)
        keep[small] = False
        labels, centers = _compact(labels, centers, keep)


def _cluster_stats(members, eps_reg):
    mu = members.mean(axis=0)
    diff = members - mu
    cov = diff.T @ diff / len(members)  # population covariance
    dim = cov.shape[0]
    trace = float(np.trace(cov))
    scale = trace / dim if trace > 0.0 else 1.0
    cov_reg = cov + eps_reg * scale * np.eye(dim)
    if eps_reg > 0.0:
        inv = cho_solve(cho_factor(cov_reg, lower=True), np.eye(dim))
    else:
        inv = np.linalg.inv(cov_reg)
    # C-contiguous so scores match bitwise after a save/load round trip
    return ClusterStats(mu=mu, cov=cov_reg, inv=np.ascontiguousarray(inv))


def fit(embeddings, q=1, eps_reg=1e-3, seed=0, eps_d=1e-12) -> MahalanobisScorer:
    """Fit per-cluster statistics on training embeddings.

    Clusters that end up with fewer than 2 members cannot support a
    covariance estimate and are merged into the nearest surviving cluster
    with a warning.  q = 1 skips clustering entirely.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("embeddings must be a non-empty (n, d) array")
    if q < 1:
        raise ValueError("q must be at least 1")
    if len(x) <= q:
        raise ValueError(f"need more than q={q} embeddings, got {len(x)}")
    if q == 1:
        labels = np.zeros(len(x), dtype=np.intp)
        centers = x.mean(axis=0, keepdims=True)
    else:
        labels, centers = _lloyd(x, q, np.random.default_rng(seed))
    labels, centers = _merge_small(labels, centers)
    stats = [_cluster_stats(x[labels == k], eps_reg) for k in range(len(centers))]
    return MahalanobisScorer(stats=stats, eps_reg=eps_reg, eps_d=eps_d)


def sq_distance(h, scorer: MahalanobisScorer) -> float:
    """Smallest squared Mahalanobis distance over clusters (ties: lowest)."""
    h = np.asarray(h, dtype=np.float64)
    best = None
    for cs in scorer.stats:
        diff = h - cs.mu
        d2 = float(diff @ cs.inv @ diff)
        if best is None or d2 < best:
            best = d2
    return best


def md_score(h, scorer: MahalanobisScorer) -> float:
    """Reciprocal squared distance, clamped so an embedding that lands on
    a cluster mean scores 1/eps_d rather than infinity."""
    return 1.0 / max(sq_distance(h, scorer), scorer.eps_d)


def decide(score: float, threshold: float) -> Decision:
    """In-distribution verdict iff score >= threshold."""
    verdict = "ID" if score >= threshold else "OOD"
    return Decision(verdict=verdict, score=float(score), threshold=float(threshold))
