"""K-means over latent vectors and per-cluster annotation budgets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import LabelPool


@dataclass
class ClusterModel:
    centroids: np.ndarray   # (M, d)
    assignment: np.ndarray  # (n,) nearest centroid, ties -> lowest index
    distance: np.ndarray    # (n,) Euclidean distance to assigned centroid
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)


@dataclass
class ClusterBudgets:
    counts: np.ndarray  # per-cluster number of samples to annotate
    total: int


def _sq_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences rather than the expanded dot-product form, so that
    # coincident points get exactly zero distance
    diff = X[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _assign(X, centroids):
    d2 = _sq_distances(X, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def kmeans_plusplus(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; returns indices of the M initial centres."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(X, X[chosen])[:, 0]
    for _ in range(1, M):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centre already; pick an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(X, X[idx: idx + 1])[:, 0])
    return np.array(chosen)


def kmeans_fit(latents: np.ndarray, M: int, seed=0, max_iter: int = 300,
               init: np.ndarray | None = None) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the assignment no longer changes or after ``max_iter``
    updates. An empty cluster is moved onto the point farthest from its own
    centroid. ``init`` overrides the seeding with explicit starting centres.
    """
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("latents must be a 2-D array")
    n = X.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"number of clusters must be in [1, {n}], got {M}")
    if not np.all(np.isfinite(X)):
        raise ValueError("latents contain non-finite values")

    if init is not None:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (M, X.shape[1]):
            raise ValueError(f"init must have shape {(M, X.shape[1])}")
    else:
        centroids = X[kmeans_plusplus(X, M, np.random.default_rng(seed))].copy()

    labels, d2 = _assign(X, centroids)
    history = [float(d2.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=M)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        new = centroids.copy()
        full = counts > 0
        new[full] = sums[full] / counts[full, None]
        for c in np.flatnonzero(~full):
            far = int(np.argmax(d2))
            new[c] = X[far]
            d2[far] = 0.0
        centroids = new
        new_labels, d2 = _assign(X, centroids)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return ClusterModel(centroids, labels, np.sqrt(d2), float(d2.sum()), n_iter, history)


def default_n_clusters(num_classes: int, n: int) -> int:
    return max(1, min(2 * num_classes, n))


def budgets(cm: ClusterModel, pool: LabelPool, percentage: float) -> ClusterBudgets:
    """Split this round's annotation budget across clusters.

    The round budget is ``round(percentage * n_train) - |labeled|``. Each
    cluster's share is proportional to its size; fractional shares are
    rounded by largest remainder (ties to the lower cluster index) and capped
    at the cluster's unlabeled count, with any excess passed on by the same
    rule.
    """
    if not percentage > 0:
        raise ValueError("percentage must be positive")
    if not pool.unlabeled:
        raise ValueError("no unlabeled samples left to annotate")
    n = pool.size
    M = cm.n_clusters
    size = np.bincount(cm.assignment, minlength=M)
    cap = np.bincount(cm.assignment[list(pool.unlabeled)], minlength=M)
    target = int(round(percentage * n)) - len(pool.labeled)
    target = max(0, min(target, int(cap.sum())))
    raw = target * size / n
    counts = np.minimum(np.floor(raw).astype(int), cap)
    while counts.sum() < target:
        open_ = counts < cap
        deficit = np.where(open_, raw - counts, -np.inf)
        counts[int(np.argmax(deficit))] += 1
    return ClusterBudgets(counts, target)


class LatentKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans_fit`.

    ``transform`` returns Euclidean distances to each centroid.
    """

    def __init__(self, n_clusters=8, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = kmeans_fit(X, self.n_clusters, self.random_state, self.max_iter)
        self.cluster_centers_ = self.model_.centroids
        self.labels_ = self.model_.assignment
        self.distances_ = self.model_.distance
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.n_iter
        return self

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.sqrt(_sq_distances(X, self.cluster_centers_))

    def predict(self, X):
        return np.argmin(self.transform(X), axis=1)
