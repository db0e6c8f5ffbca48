"""Cluster-stratified undersampling driven by centroid dispersion.

Each majority partition is clustered; every member's dispersion from its
centroid (Jensen-Shannon divergence between histogram distributions, or plain
Euclidean distance) is standardized per cluster, the z-scores are cut into
unit-width intervals, and each cluster's share of the target is drawn evenly
across its intervals so that rare, far-from-centroid textures survive the
undersampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .clustering import DEFAULT_K, kmeans_fit
from .core import rng_stream
from .exceptions import ConfigError, DataError, InfeasibleError, ShapeError, StateError

logger = logging.getLogger(__name__)

MODES = ("jsd", "euclidean")
WEIGHTINGS = ("equal", "dispersion")
DEFAULT_BINS = 32
DEFAULT_Z_RANGE = (-3.0, 15.0)
EPS = 1e-9
SIGMA_FLOOR = 1e-12


# --------------------------------------------------------------------------
# distributions and divergences
# --------------------------------------------------------------------------

def to_distributions(X, n_bins=DEFAULT_BINS, lo=None, hi=None):
    """Row-wise histograms of vector components as probability distributions.

    Components are binned into ``n_bins`` equal-width bins over ``[lo, hi]``
    (default: the global min/max of ``X``), counts are divided by the
    dimension, then every bin gets a floor of ``EPS`` and the row is
    renormalized so that KL divergences stay finite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if n_bins < 2:
        raise ConfigError(f"bin count must be at least 2, got {n_bins}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature component")
    lo = float(X.min()) if lo is None else float(lo)
    hi = float(X.max()) if hi is None else float(hi)
    n, d = X.shape
    width = hi - lo
    if width > 0:
        idx = np.floor((X - lo) / width * n_bins).astype(np.int64)
        np.clip(idx, 0, n_bins - 1, out=idx)
    else:
        idx = np.zeros(X.shape, dtype=np.int64)
    flat = idx + (np.arange(n) * n_bins)[:, None]
    counts = np.bincount(flat.ravel(), minlength=n * n_bins).reshape(n, n_bins)
    return (counts / d + EPS) / (1.0 + n_bins * EPS)


def to_distribution(v, n_bins=DEFAULT_BINS, lo=None, hi=None):
    return to_distributions(np.asarray(v)[None, :], n_bins, lo, hi)[0]


def _check_pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ShapeError(f"bin-count mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return p, q


def kl_divergence(p, q):
    """``sum p log(p/q)`` in nats over the last axis; zero-mass terms drop out."""
    p, q = _check_pair(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    # clip rounding residue below zero
    return np.maximum(terms.sum(axis=-1), 0.0)


def js_divergence(p1, p2):
    """Symmetric Jensen-Shannon divergence, bounded by ``ln 2``."""
    p1, p2 = _check_pair(p1, p2)
    m = 0.5 * (p1 + p2)
    return np.minimum(0.5 * kl_divergence(p1, m) + 0.5 * kl_divergence(p2, m),
                      math.log(2.0))


# --------------------------------------------------------------------------
# per-cluster dispersion and interval buckets
# --------------------------------------------------------------------------

@dataclass
class DispersionStats:
    cluster: int
    dispersion: np.ndarray
    mean: float
    std: float
    z: np.ndarray

    @property
    def degenerate(self):
        return self.std < SIGMA_FLOOR


def dispersion_stats(members, centroid, mode="jsd", n_bins=DEFAULT_BINS,
                     lo=None, hi=None, cluster=0):
    """Dispersion of each member from the centroid, with population z-scores.

    With a (near-)zero spread every z-score is set to 0 so the cluster falls
    into a single interval.
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0 or members.size == 0:
        raise StateError(f"cluster {cluster} is empty")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    centroid = np.asarray(centroid, dtype=np.float64)
    if mode == "jsd":
        if lo is None:
            lo = min(members.min(), centroid.min())
        if hi is None:
            hi = max(members.max(), centroid.max())
        pm = to_distributions(members, n_bins, lo, hi)
        pc = to_distribution(centroid, n_bins, lo, hi)
        d = js_divergence(pm, pc[None, :])
    else:
        d = np.sqrt(((members - centroid[None, :]) ** 2).sum(axis=1))
    mu = float(d.mean())
    sigma = float(d.std())
    if sigma < SIGMA_FLOOR:
        z = np.zeros_like(d)
    else:
        z = (d - mu) / sigma
    return DispersionStats(cluster, d, mu, sigma, z)


@dataclass
class IntervalBuckets:
    """Members of one cluster grouped by unit-width z-score interval."""

    z_min: float
    z_max: float
    buckets: dict  # interval index -> array of patch ids

    @property
    def n_intervals(self):
        return n_intervals(self.z_min, self.z_max)

    def boundaries(self):
        return [(self.z_min + i, min(self.z_min + i + 1, self.z_max))
                for i in range(self.n_intervals)]

    def sizes(self):
        return {i: len(b) for i, b in sorted(self.buckets.items())}


def n_intervals(z_min, z_max):
    if not z_max > z_min:
        raise ConfigError(f"z_max ({z_max}) must exceed z_min ({z_min})")
    return int(math.ceil(z_max - z_min))


def interval_index(z, z_min=DEFAULT_Z_RANGE[0], z_max=DEFAULT_Z_RANGE[1]):
    """Unit interval holding each z; out-of-range values go to the end intervals."""
    n = n_intervals(z_min, z_max)
    idx = np.floor(np.asarray(z, dtype=np.float64) - z_min).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def make_buckets(ids, z, z_min=DEFAULT_Z_RANGE[0], z_max=DEFAULT_Z_RANGE[1]):
    ids = np.asarray(ids, dtype=np.int64)
    idx = interval_index(z, z_min, z_max)
    buckets = {int(i): ids[idx == i] for i in np.unique(idx)}
    return IntervalBuckets(float(z_min), float(z_max), buckets)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass
class ClusterDraw:
    cluster: int
    budget: int
    drawn: np.ndarray
    interval_counts: dict
    rounds: int = 0
    round_robin: bool = False

    @property
    def shortfall(self):
        return len(self.drawn) < self.budget


@dataclass
class SampledSet:
    ids: np.ndarray
    target: int
    mode: str
    weighting: str
    draws: list = field(default_factory=list)

    @property
    def shortfall(self):
        return len(self.ids) < self.target

    @property
    def budgets(self):
        return [d.budget for d in self.draws]

    def audit_rows(self):
        """(cluster, interval, budget, drawn) rows in cluster/interval order."""
        rows = []
        for d in self.draws:
            for i, n in sorted(d.interval_counts.items()):
                rows.append((d.cluster, i, d.budget, n))
        return rows


def stratified_sample(buckets, budget, rng, cluster=0):
    """Round-based draw of up to ``budget`` ids spread across intervals.

    Each round takes ``min(s, |bucket|)`` ids from every non-empty bucket in
    ascending interval order, where ``s = floor(remaining / n_buckets)``.
    Exhausted buckets drop out and ``s`` is recomputed. Once ``s`` reaches 0
    with budget left, one id per remaining bucket is taken in ascending
    order until the budget is spent.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if budget < 0:
        raise ConfigError("budget must be nonnegative")
    # drawing without replacement == walking a random permutation
    queues = {i: rng.permutation(b) for i, b in sorted(buckets.buckets.items())
              if len(b)}
    cursor = {i: 0 for i in queues}
    counts = {i: 0 for i in queues}
    taken = []
    remaining = int(budget)
    rounds = 0
    round_robin = False

    def take(i, n):
        nonlocal remaining
        c = cursor[i]
        taken.append(queues[i][c:c + n])
        cursor[i] = c + n
        counts[i] += n
        remaining -= n

    live = [i for i in queues]
    while remaining > 0 and live:
        s = remaining // len(live)
        if s <= 0:
            round_robin = True
            for i in live:
                if remaining <= 0:
                    break
                take(i, 1)
            break
        rounds += 1
        for i in live:
            n = min(s, len(queues[i]) - cursor[i])
            if n > 0:
                take(i, n)
        live = [i for i in live if cursor[i] < len(queues[i])]

    drawn = np.concatenate(taken) if taken else np.empty(0, dtype=np.int64)
    return ClusterDraw(cluster, int(budget), drawn.astype(np.int64), counts,
                       rounds, round_robin)


def allocate_budgets(target, weights, capacities):
    """Split ``target`` across clusters in proportion to ``weights``.

    Largest-remainder rounding makes the budgets sum to ``target`` exactly;
    ties go to the lower cluster index. A cluster never gets more than its
    capacity, any excess is re-spread over the others by the same rule.
    """
    weights = np.asarray(weights, dtype=np.float64)
    caps = np.asarray(capacities, dtype=np.int64)
    if target > caps.sum():
        raise InfeasibleError(f"target {target} exceeds source size {caps.sum()}")
    budgets = np.zeros(len(caps), dtype=np.int64)
    active = np.ones(len(caps), dtype=bool)
    left = int(target)
    while left > 0:
        w = np.where(active, weights, 0.0)
        if w.sum() <= 0:
            w = active.astype(np.float64)
        ideal = left * w / w.sum()
        over = active & (ideal >= caps)
        if over.any():
            budgets[over] = caps[over]
            left -= int(caps[over].sum())
            active &= ~over
            continue
        base = np.floor(ideal).astype(np.int64)
        rest = left - int(base.sum())
        frac = ideal - base
        order = np.lexsort((np.arange(len(caps)), -frac))
        order = order[active[order]]
        base[order[:rest]] += 1
        budgets += base
        left = 0
    return budgets


def balance_partition(X, ids, labels, centroids, target, weighting="dispersion",
                      mode="jsd", seed=0, n_bins=DEFAULT_BINS,
                      z_range=DEFAULT_Z_RANGE, stream_index=0):
    """Undersample one partition to ``target`` patches, stratified per cluster.

    ``labels`` and ``centroids`` come from clustering this same partition.
    Under ``weighting="dispersion"`` cluster ``j`` receives
    ``target * D_mu(j) / sum D_mu``; under ``"equal"`` every cluster gets
    ``target // k`` with the remainder given to the lowest indices.
    """
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels)
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if target < 1:
        raise ConfigError("target must be at least 1")
    if target > len(X):
        raise InfeasibleError(
            f"target {target} exceeds the {len(X)} patches available")
    k = len(centroids)
    lo, hi = float(X.min()), float(X.max())

    members = [np.flatnonzero(labels == j) for j in range(k)]
    stats = [dispersion_stats(X[m], centroids[j], mode, n_bins, lo, hi, j)
             if len(m) else None for j, m in enumerate(members)]
    sizes = np.array([len(m) for m in members])
    if weighting == "dispersion":
        weights = np.array([s.mean if s is not None else 0.0 for s in stats])
    else:
        weights = (sizes > 0).astype(np.float64)
    budgets = allocate_budgets(target, weights, sizes)

    draws = []
    for j in range(k):
        if stats[j] is None:
            draws.append(ClusterDraw(j, 0, np.empty(0, dtype=np.int64), {}))
            continue
        buckets = make_buckets(ids[members[j]], stats[j].z, *z_range)
        rng = rng_stream(seed, "sampling", stream_index, j)
        draws.append(stratified_sample(buckets, int(budgets[j]), rng, cluster=j))

    picked = np.concatenate([d.drawn for d in draws]) if draws else np.empty(0)
    out = np.sort(picked.astype(np.int64))
    result = SampledSet(out, int(target), mode, weighting, draws)
    if result.shortfall:
        logger.warning("sampling shortfall: %d of %d", len(out), target)
    return result, stats


class DivergenceSampler(BaseEstimator):
    """Cluster-stratified undersampler with an imblearn-style ``fit_resample``.

    Parameters
    ----------
    n_clusters : int
        Clusters fitted on the majority class.
    mode : {"jsd", "euclidean"}
        Dispersion measure between a patch and its centroid.
    weighting : {"dispersion", "equal"}
        How the target is split across clusters.
    n_bins : int
        Histogram bins for the ``jsd`` representation.
    z_min, z_max : float
        Span of the unit-width z-score intervals; outliers clamp to the ends.
    random_state : int
        Run seed.
    """

    def __init__(self, n_clusters=DEFAULT_K, mode="jsd", weighting="dispersion",
                 n_bins=DEFAULT_BINS, z_min=DEFAULT_Z_RANGE[0],
                 z_max=DEFAULT_Z_RANGE[1], random_state=0):
        self.n_clusters = n_clusters
        self.mode = mode
        self.weighting = weighting
        self.n_bins = n_bins
        self.z_min = z_min
        self.z_max = z_max
        self.random_state = random_state

    def fit(self, X, n_target):
        """Select ``n_target`` rows of ``X``; indices land in ``sample_indices_``."""
        X = check_array(X, dtype=np.float64)
        self.cluster_model_ = kmeans_fit(X, self.n_clusters, self.random_state)
        self.sample_, self.dispersion_ = balance_partition(
            X, np.arange(len(X)), self.cluster_model_.labels,
            self.cluster_model_.centroids, int(n_target), self.weighting,
            self.mode, self.random_state, self.n_bins, (self.z_min, self.z_max))
        self.sample_indices_ = self.sample_.ids
        return self

    def fit_resample(self, X, y):
        """Undersample every class down to the size of the smallest one."""
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        classes, counts = np.unique(y, return_counts=True)
        n_min = counts.min()
        keep = []
        for c, n in zip(classes, counts):
            rows = np.flatnonzero(y == c)
            if n == n_min:
                keep.append(rows)
                continue
            self.fit(X[rows], n_min)
            keep.append(rows[self.sample_indices_])
        keep = np.sort(np.concatenate(keep))
        self.sample_indices_ = keep
        return X[keep], y[keep]
