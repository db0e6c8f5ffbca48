"""k-means on feature vectors (within-cluster squared-error minimization)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import rng_stream
from .exceptions import ConfigError, InfeasibleError

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_N_INIT = 10
_CHUNK = 8192


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    empty_repairs: int = 0
    ids: np.ndarray = None

    @property
    def k(self):
        return len(self.centroids)

    @property
    def inertia(self):
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def assignment(self):
        """Mapping patch_id -> cluster index (row index when no ids given)."""
        ids = self.ids if self.ids is not None else np.arange(len(self.labels))
        return dict(zip(ids.tolist(), self.labels.tolist()))

    def members(self, j):
        return np.flatnonzero(self.labels == j)


def squared_distances(X, centroids):
    """Exact ``||x - c||^2`` for every row/centroid pair, chunked over rows."""
    out = np.empty((len(X), len(centroids)))
    for start in range(0, len(X), _CHUNK):
        diff = X[start:start + _CHUNK, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _assign(X, centroids):
    dist = squared_distances(X, centroids)
    labels = np.argmin(dist, axis=1)  # first minimum -> lowest cluster index
    own = dist[np.arange(len(X)), labels]
    return labels, own


def _furthest_point_init(X, k, rng):
    chosen = [int(rng.integers(len(X)))]
    mind = squared_distances(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, squared_distances(X, X[nxt][None, :])[:, 0])
    return X[chosen].copy()


def _update(X, labels, k, centroids):
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    for j in range(k):  # fixed cluster order keeps the reduction deterministic
        if counts[j]:
            sums[j] = X[labels == j].sum(axis=0)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    return new, counts


def empty_cluster_repair(centroids, X, labels, own_dist, counts):
    """Move each empty centroid onto the point farthest from its own centroid.

    Returns the repaired centroids and the number of clusters touched. Points
    already used for a repair in this call are not reused.
    """
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return centroids, 0
    centroids = centroids.copy()
    order = np.lexsort((np.arange(len(X)), -own_dist))
    for j, i in zip(empty, order):
        centroids[j] = X[i]
    return centroids, len(empty)


def hartigan_refine(X, labels, k):
    """Single-point transfers that lower the objective, until none is left.

    Moving ``x`` from cluster ``a`` to ``b`` changes the within-cluster sum
    of squares by ``n_b/(n_b+1) |x-mu_b|^2 - n_a/(n_a-1) |x-mu_a|^2``. Lloyd
    iterations stop at partitions where such a move still pays off; this pass
    removes them. Candidates are screened in bulk and every move is then
    re-checked against the current cluster statistics, so the result is a
    partition with no improving single-point move.

    Returns the refined labels and the number of moves made.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, X.shape[1]))
    for j in range(k):
        sums[j] = X[labels == j].sum(axis=0)
    moves = 0
    while True:
        nonempty = counts > 0
        mu = sums / np.where(nonempty, counts, 1.0)[:, None]
        d = squared_distances(X, mu)
        stay_n = counts[labels]
        own = d[np.arange(len(X)), labels]
        # a singleton cannot leave its cluster
        stay = np.where(stay_n > 1, stay_n / np.maximum(stay_n - 1, 1) * own, np.inf)
        join = counts / (counts + 1) * d
        join[np.arange(len(X)), labels] = np.inf
        candidates = np.flatnonzero(join.min(axis=1) < stay * (1 - 1e-12))
        if len(candidates) == 0:
            return labels, moves
        moved = False
        for i in candidates:
            a = labels[i]
            if counts[a] <= 1:
                continue
            dist = ((X[i] - sums / np.maximum(counts, 1.0)[:, None]) ** 2).sum(axis=1)
            gain = counts / (counts + 1) * dist
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < counts[a] / (counts[a] - 1) * dist[a] * (1 - 1e-12):
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= X[i]
                sums[b] += X[i]
                moves += 1
                moved = True
        if not moved:
            return labels, moves


def _lloyd(Xs, centroids, k, max_iter, tol, history):
    """Lloyd iterations from ``centroids``; appends to ``history``."""
    labels = None
    repairs = 0
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_labels, own = _assign(Xs, centroids)
        history.append(float(own.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        centroids_new, counts = _update(Xs, labels, k, centroids)
        centroids_new, fixed = empty_cluster_repair(
            centroids_new, Xs, labels, own, counts)
        repairs += fixed
        shift = np.sqrt(((centroids_new - centroids) ** 2).sum(axis=1)).max()
        centroids = centroids_new
        if shift < tol and not fixed:
            labels, own = _assign(Xs, centroids)
            history.append(float(own.sum()))
            converged = True
            break
    else:
        labels, own = _assign(Xs, centroids)
        history.append(float(own.sum()))
    return centroids, labels, n_iter, converged, repairs


def _single_run(Xs, k, rng, max_iter, tol, refine):
    history = []
    centroids = _furthest_point_init(Xs, k, rng)
    centroids, labels, n_iter, converged, repairs = _lloyd(
        Xs, centroids, k, max_iter, tol, history)
    while refine and n_iter < max_iter:
        refined, moves = hartigan_refine(Xs, labels, k)
        if moves == 0:
            break
        centroids, _ = _update(Xs, refined, k, centroids)
        centroids, labels, more, converged, fixed = _lloyd(
            Xs, centroids, k, max_iter - n_iter, tol, history)
        n_iter += more
        repairs += fixed
    return centroids, labels, history, n_iter, converged, repairs


def kmeans_fit(X, k=DEFAULT_K, seed=0, max_iter=300, tol=1e-6, ids=None,
               stream_index=0, n_init=DEFAULT_N_INIT, refine=True):
    """Lloyd iterations from furthest-point seeding, best of ``n_init`` runs.

    Each run draws its first centroid from its own random stream. With
    ``refine`` every run ends with Hartigan single-point transfers (and
    further Lloyd steps if those moved anything). The run with the lowest
    final inertia wins; ties go to the earliest run.

    Rows are processed in lexicographic order internally, which makes the
    result independent of input ordering (labels are mapped back to the
    caller's order).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("features must be a 2-d array")
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if n_init < 1:
        raise ConfigError(f"n_init must be at least 1, got {n_init}")
    if len(X) < k:
        raise InfeasibleError(f"cannot form {k} clusters from {len(X)} vectors")

    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    best = None
    for run in range(n_init):
        rng = rng_stream(seed, "clustering", stream_index, run)
        result = _single_run(Xs, k, rng, max_iter, tol, refine)
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    centroids, labels, history, n_iter, converged, repairs = best

    if repairs:
        logger.warning("k-means: %d empty-cluster repair(s)", repairs)
    out = np.empty_like(labels)
    out[order] = labels
    return ClusterModel(centroids, out, history, n_iter, converged, repairs,
                        None if ids is None else np.asarray(ids, dtype=np.int64))


class KMeansClustering(ClusterMixin, BaseEstimator):
    """k-means with furthest-point initialization.

    Parameters
    ----------
    n_clusters : int
        Number of clusters.
    max_iter : int
        Iteration cap for Lloyd updates.
    tol : float
        Stop when no centroid moves farther than this.
    n_init : int
        Independent seedings; the lowest-inertia run is kept.
    refine : bool
        Finish each run with Hartigan single-point transfers.
    random_state : int
        Seed for the clustering random stream.
    """

    def __init__(self, n_clusters=DEFAULT_K, max_iter=300, tol=1e-6,
                 n_init=DEFAULT_N_INIT, refine=True, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.refine = refine
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = kmeans_fit(X, self.n_clusters, self.random_state,
                                 self.max_iter, self.tol, n_init=self.n_init,
                                 refine=self.refine)
        self.cluster_centers_ = self.model_.centroids
        self.labels_ = self.model_.labels
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _assign(X, self.cluster_centers_)[0]
