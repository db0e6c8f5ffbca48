"""Integration of the three sub-model outputs (fusion modes M0-M4).

M0 is a majority vote over predicted labels. M1-M4 build a per-patch meta
feature and hand it to a bagged decision-tree ensemble:

* M1 concatenates the three softmax pairs,
* M2 concatenates the three encodings and reduces them with one PCA,
* M3 reduces each encoding with its own PCA and concatenates the results,
* M4 averages the three encodings elementwise and applies GeLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import rng_stream
from .exceptions import ConfigError, ShapeError, TrainingError

MODES = ("m0", "m1", "m2", "m3", "m4")


def gelu(z):
    """Tanh approximation ``0.5 z (1 + tanh(sqrt(2/pi) (z + 0.044715 z^3)))``."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * z * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (z + 0.044715 * z ** 3)))


# --------------------------------------------------------------------------
# fusion input
# --------------------------------------------------------------------------

@dataclass
class FusionInput:
    """Per-patch outputs of the AvB, AvC and Av(B+C) models, in that order."""

    labels: np.ndarray      # (n, 3) in {0, 1}
    softmax: np.ndarray     # (n, 3, 2)
    encodings: tuple        # three (n, h) arrays

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.softmax = np.asarray(self.softmax, dtype=np.float64)
        self.encodings = tuple(np.asarray(e, dtype=np.float64) for e in self.encodings)
        n = len(self.labels)
        if self.labels.shape != (n, 3) or self.softmax.shape != (n, 3, 2):
            raise ShapeError("labels must be (n, 3) and softmax (n, 3, 2)")
        if len(self.encodings) != 3:
            raise ShapeError("exactly three encodings are required")
        h = self.encodings[0].shape[1]
        for e in self.encodings:
            if e.shape != (n, h):
                raise ShapeError("encodings must all be (n, h)")

    def __len__(self):
        return len(self.labels)

    @property
    def hidden_dim(self):
        return self.encodings[0].shape[1]

    def subset(self, rows):
        return FusionInput(self.labels[rows], self.softmax[rows],
                           tuple(e[rows] for e in self.encodings))

    @classmethod
    def from_predictions(cls, preds):
        """Build from three :class:`~patchbalance.classifiers.Prediction` objects."""
        return cls(np.stack([p.labels for p in preds], axis=1),
                   np.stack([p.softmax for p in preds], axis=1),
                   tuple(p.encoding for p in preds))

    def to_array(self):
        """Flat layout ``[y1 y2 y3 | s1 s2 s3 | x1 x2 x3]`` (9 + 3h columns)."""
        return np.hstack([self.labels, self.softmax.reshape(len(self), 6),
                          *self.encodings])

    @classmethod
    def from_array(cls, X):
        X = np.asarray(X, dtype=np.float64)
        rest = X.shape[1] - 9
        if rest < 3 or rest % 3:
            raise ShapeError(f"cannot split {X.shape[1]} columns into a fusion input")
        h = rest // 3
        enc = tuple(X[:, 9 + i * h: 9 + (i + 1) * h] for i in range(3))
        return cls(X[:, :3].round().astype(np.int64), X[:, 3:9].reshape(-1, 3, 2), enc)


def fuse_m0(labels):
    """1 where at least two of the three predicted labels are 1."""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if labels.shape[1] != 3:
        raise ShapeError("majority vote needs three labels per patch")
    return (labels.sum(axis=1) >= 2).astype(np.int64)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # (retained, dim), orthonormal rows
    explained_variance: np.ndarray  # all eigenvalues, descending

    @property
    def n_components(self):
        return len(self.components)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components + self.mean


def pca_fit(X, retain=0.95, cap=None):
    """Eigendecomposition of the sample covariance (divisor n-1).

    ``retain`` is either a component count (int) or the smallest variance
    fraction (float in (0, 1]) the kept components must reach. ``cap`` bounds
    the count in the fraction case. Component signs are fixed so the entry of
    largest magnitude is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ConfigError("PCA needs at least two vectors")
    dim = X.shape[1]
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order].T
    pivot = np.argmax(np.abs(vecs), axis=1)
    vecs *= np.sign(vecs[np.arange(dim), pivot])[:, None]

    if isinstance(retain, (int, np.integer)) and not isinstance(retain, bool):
        if not 1 <= retain <= dim:
            raise ConfigError(f"cannot retain {retain} components of {dim}")
        count = int(retain)
    else:
        frac = float(retain)
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"variance fraction must lie in (0, 1], got {frac}")
        total = vals.sum()
        if total <= 0:
            count = 1
        else:
            cum = np.cumsum(vals) / total
            count = int(np.searchsorted(cum, frac - 1e-12) + 1)
        count = min(count, dim)
        if cap is not None:
            count = min(count, int(cap))
    return PcaModel(mean, vecs[:count].copy(), vals)


class PrincipalComponents(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`pca_fit`."""

    def __init__(self, retain=0.95, cap=64):
        self.retain = retain
        self.cap = cap

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = pca_fit(X, self.retain, self.cap)
        self.components_ = self.model_.components
        self.explained_variance_ = self.model_.explained_variance
        self.mean_ = self.model_.mean
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.transform(check_array(X, dtype=np.float64))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return self.model_.inverse_transform(Z)


# --------------------------------------------------------------------------
# decision trees and the bagged ensemble
# --------------------------------------------------------------------------

@dataclass
class DecisionTree:
    feature: np.ndarray    # -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray     # (n_nodes, 2) class frequencies of training samples

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            rows = np.flatnonzero(inner)
            go_left = X[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]],
                                  self.right[node[rows]])

    def predict(self, X):
        c = self.counts[self.apply(X)]
        return (c[:, 1] > c[:, 0]).astype(np.int64)


def best_split(X, y, features, min_leaf):
    """Greedy Gini split over ``features`` (ascending).

    Returns ``(feature, threshold)`` or ``None``. Ties prefer the lower
    feature index, then the lower threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    vals = X[:, features]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    sy = y[order]
    left1 = np.cumsum(sy, axis=0)[:-1]               # split after row i
    nl = np.arange(1, n)[:, None].astype(np.float64)
    nr = n - nl
    left0 = nl - left1
    tot1 = sy.sum(axis=0)
    right1 = tot1 - left1
    right0 = nr - right1
    # maximizing this is equivalent to minimizing weighted child Gini
    score = (left1 ** 2 + left0 ** 2) / nl + (right1 ** 2 + right0 ** 2) / nr
    valid = sv[1:] > sv[:-1]
    sizes = np.arange(1, n)[:, None]
    valid &= (sizes >= min_leaf) & (sizes <= n - min_leaf)
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    best_pos = np.argmax(score, axis=0)             # first -> lowest threshold
    best_val = score[best_pos, np.arange(len(features))]
    j = int(np.argmax(best_val))                    # first -> lowest feature
    if not np.isfinite(best_val[j]):
        return None
    i = best_pos[j]
    lo, hi = sv[i, j], sv[i + 1, j]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:
        thr = lo
    return int(features[j]), float(thr)


def build_tree(X, y, rng, max_depth=16, min_leaf=2, max_features=None):
    n, d = X.shape
    m = d if max_features is None else min(max_features, d)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        c1 = int(y[rows].sum())
        counts.append((len(rows) - c1, c1))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, rows, depth = stack.pop()
        c0, c1 = counts[node]
        if depth >= max_depth or c0 == 0 or c1 == 0:
            continue
        feats = np.sort(rng.choice(d, size=m, replace=False))
        split = best_split(X[rows], y[rows], feats, min_leaf)
        if split is None:
            continue
        f, thr = split
        mask = X[rows, f] <= thr
        feature[node], threshold[node] = f, thr
        lrows, rrows = rows[mask], rows[~mask]
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))
    return DecisionTree(np.array(feature), np.array(threshold), np.array(left),
                        np.array(right), np.array(counts, dtype=np.int64).reshape(-1, 2))


@dataclass
class TreeEnsemble:
    trees: list
    max_features: int

    def votes(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def predict(self, X):
        # ties between the two classes go to 0
        return (self.votes(X) > 0.5).astype(np.int64)


def forest_train(X, y, n_trees=100, max_depth=16, min_leaf=2, seed=0,
                 stream_index=0, max_features="sqrt"):
    """Bootstrap-aggregated Gini trees with ``ceil(sqrt(d))`` features per split."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("X must be (n, d) with one label per row")
    if len(np.unique(y)) < 2:
        raise TrainingError("forest training set contains a single class")
    d = X.shape[1]
    m = int(math.ceil(math.sqrt(d))) if max_features == "sqrt" else int(max_features)
    trees = []
    for t in range(n_trees):
        rng = rng_stream(seed, "forest", stream_index, t)
        boot = rng.integers(0, len(X), size=len(X))
        trees.append(build_tree(X[boot], y[boot], rng, max_depth, min_leaf, m))
    return TreeEnsemble(trees, m)


def forest_predict(ensemble, X):
    return ensemble.predict(X)


class RandomForest(ClassifierMixin, BaseEstimator):
    """Bagged decision-tree classifier for binary labels."""

    def __init__(self, n_trees=100, max_depth=16, min_leaf=2, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.ensemble_ = forest_train(X, y, self.n_trees, self.max_depth,
                                      self.min_leaf, self.random_state)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "ensemble_")
        v = self.ensemble_.votes(check_array(X, dtype=np.float64))
        return np.column_stack([1.0 - v, v])

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict(check_array(X, dtype=np.float64))


# --------------------------------------------------------------------------
# fusion modes
# --------------------------------------------------------------------------

@dataclass
class FusionConfig:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 2
    pca_retain: float = 0.95
    pca_cap: int = 64


class MetaFeatures:
    """Fit-on-train / apply-on-test feature map for one learning-based mode."""

    def __init__(self, mode, config=None):
        if mode not in ("m1", "m2", "m3", "m4"):
            raise ConfigError(f"no meta features for mode {mode!r}")
        self.mode = mode
        self.config = config or FusionConfig()
        self.pcas = []

    def fit(self, F):
        cfg = self.config
        if self.mode == "m2":
            self.pcas = [pca_fit(np.hstack(F.encodings), cfg.pca_retain, cfg.pca_cap)]
        elif self.mode == "m3":
            self.pcas = [pca_fit(e, cfg.pca_retain, cfg.pca_cap) for e in F.encodings]
        return self

    def transform(self, F):
        if self.mode == "m1":
            return F.softmax.reshape(len(F), 6)
        if self.mode == "m2":
            return self.pcas[0].transform(np.hstack(F.encodings))
        if self.mode == "m3":
            return np.hstack([p.transform(e) for p, e in zip(self.pcas, F.encodings)])
        pooled = (F.encodings[0] + F.encodings[1] + F.encodings[2]) / 3.0
        return gelu(pooled)


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Meta-classifier over three sub-model outputs.

    ``X`` is a :class:`FusionInput` or its flat array layout
    (:meth:`FusionInput.to_array`).
    """

    def __init__(self, mode="m2", n_trees=100, max_depth=16, min_leaf=2,
                 pca_retain=0.95, pca_cap=64, random_state=0):
        self.mode = mode
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.pca_retain = pca_retain
        self.pca_cap = pca_cap
        self.random_state = random_state

    @staticmethod
    def _as_input(X):
        return X if isinstance(X, FusionInput) else FusionInput.from_array(X)

    def _config(self):
        return FusionConfig(self.n_trees, self.max_depth, self.min_leaf,
                            self.pca_retain, self.pca_cap)

    def fit(self, X, y, stream_index=0):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        F = self._as_input(X)
        y = np.asarray(y).astype(np.int64)
        if len(y) != len(F):
            raise ShapeError("one label per patch is required")
        self.classes_ = np.array([0, 1])
        if self.mode == "m0":
            self.meta_ = None
            return self
        self.meta_ = MetaFeatures(self.mode, self._config()).fit(F)
        Z = self.meta_.transform(F)
        self.ensemble_ = forest_train(Z, y, self.n_trees, self.max_depth,
                                      self.min_leaf, self.random_state,
                                      stream_index=stream_index)
        return self

    def features(self, X):
        check_is_fitted(self, "classes_")
        F = self._as_input(X)
        return None if self.meta_ is None else self.meta_.transform(F)

    def predict_proba(self, X):
        check_is_fitted(self, "classes_")
        F = self._as_input(X)
        if self.meta_ is None:
            v = F.labels.sum(axis=1) / 3.0
        else:
            v = self.ensemble_.votes(self.meta_.transform(F))
        return np.column_stack([1.0 - v, v])

    def predict(self, X):
        check_is_fitted(self, "classes_")
        F = self._as_input(X)
        if self.meta_ is None:
            return fuse_m0(F.labels)
        return self.ensemble_.predict(self.meta_.transform(F))


def _fuse(mode, F, y, F_test, seed, config):
    config = config or FusionConfig()
    clf = FusionClassifier(mode, config.n_trees, config.max_depth, config.min_leaf,
                           config.pca_retain, config.pca_cap, seed).fit(F, y)
    return clf.predict(F if F_test is None else F_test)


def fuse_m1(F, y, F_test=None, seed=0, config=None):
    return _fuse("m1", F, y, F_test, seed, config)


def fuse_m2(F, y, F_test=None, seed=0, config=None):
    return _fuse("m2", F, y, F_test, seed, config)


def fuse_m3(F, y, F_test=None, seed=0, config=None):
    return _fuse("m3", F, y, F_test, seed, config)


def fuse_m4(F, y, F_test=None, seed=0, config=None):
    return _fuse("m4", F, y, F_test, seed, config)
