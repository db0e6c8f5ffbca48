"""One-hidden-layer binary classifiers for the three sub-problems.

A vs B, A vs C and A vs (B+C) each get a small ReLU network on frozen patch
features, trained with plain minibatch SGD on mean cross-entropy. The hidden
activations double as the encoder representation used by fusion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import rng_stream
from .exceptions import DataError, ShapeError, TrainingError

PROBLEMS = ("AvB", "AvC", "AvBC")
PROB_CLIP = 1e-12

CKPT_MAGIC = b"PBMD"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIII")


def cross_entropy_loss(probs, labels):
    """Mean binary cross-entropy of positive-class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ShapeError(f"length mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class MLPParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def shapes(self):
        return self.W1.shape[0], self.W1.shape[1]

    def arrays(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat, d, h):
        sizes = [d * h, h, h * 2, 2]
        if len(flat) != sum(sizes):
            raise ShapeError(f"expected {sum(sizes)} parameters, got {len(flat)}")
        parts = np.split(np.asarray(flat, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(d, h), parts[1].copy(),
                   parts[2].reshape(h, 2), parts[3].copy())

    @classmethod
    def glorot(cls, d, h, rng):
        a1 = np.sqrt(6.0 / (d + h))
        a2 = np.sqrt(6.0 / (h + 2))
        return cls(rng.uniform(-a1, a1, (d, h)), np.zeros(h),
                   rng.uniform(-a2, a2, (h, 2)), np.zeros(2))


def forward(params, X):
    z1 = X @ params.W1 + params.b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ params.W2 + params.b2
    return z1, hidden, logits


def loss_and_grad(params, X, y):
    """Mean cross-entropy and its gradient for every parameter array."""
    z1, hidden, logits = forward(params, X)
    n = len(X)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dW2 = hidden.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dz1 = (dlogits @ params.W2.T) * (z1 > 0)
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return float(loss), MLPParams(dW1, db1, dW2, db2)


@dataclass
class TrainingLog:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


@dataclass
class BinaryClassifier:
    params: MLPParams
    problem: str = ""
    log: TrainingLog = field(default_factory=TrainingLog)

    @property
    def input_dim(self):
        return self.params.W1.shape[0]

    @property
    def hidden_dim(self):
        return self.params.W1.shape[1]


@dataclass
class Prediction:
    labels: np.ndarray
    softmax: np.ndarray
    encoding: np.ndarray

    @property
    def scores(self):
        return self.softmax[:, 1]


def train(X, y, hidden=64, batch_size=512, learning_rate=1e-4, epochs=10,
          seed=0, problem="", stream_index=0):
    """Minibatch SGD without momentum; shuffling drawn from the seed stream."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("X must be (n, d) with one label per row")
    if len(X) == 0:
        raise TrainingError("empty training set")
    if not set(np.unique(y)) <= {0, 1}:
        raise TrainingError("labels must be binary")
    if len(np.unique(y)) < 2:
        raise TrainingError("training set contains a single class")
    rng = rng_stream(seed, "classifiers", stream_index)
    params = MLPParams.glorot(X.shape[1], hidden, rng)
    log = TrainingLog()
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            b = order[start:start + batch_size]
            _, g = loss_and_grad(params, X[b], y[b])
            for p, gp in zip(params.arrays(), g.arrays()):
                p -= learning_rate * gp
        logits = forward(params, X)[2]
        log.loss.append(float(-_log_softmax(logits)[np.arange(len(y)), y].mean()))
        log.accuracy.append(float(np.mean((logits[:, 1] > logits[:, 0]) == y)))
    return BinaryClassifier(params, problem, log)


def predict(model, X):
    """Labels (ties -> 0), softmax pairs and hidden-layer encodings."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"expected dimension {model.input_dim}, got {X.shape[1]}")
    _, hidden, logits = forward(model.params, X)
    return predict_from_logits(logits, hidden)


def predict_from_logits(logits, hidden=None):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = (logits[:, 1] > logits[:, 0]).astype(np.int64)
    return Prediction(labels, softmax(logits), hidden)


def finite_difference_check(model, X, y, n_params=20, step=1e-5, seed=0):
    """Largest relative gap between analytic and central-difference gradients.

    ``n_params`` parameters are chosen at random (all of them if fewer exist).
    """
    params = model.params if isinstance(model, BinaryClassifier) else model
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if len(X) < 1:
        raise ShapeError("need at least one sample")
    d, h = params.shapes
    flat = params.flat()
    grad = loss_and_grad(params, X, y)[1].flat()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    worst = 0.0
    for i in picks:
        bumped = flat.copy()
        bumped[i] += step
        up = loss_and_grad(MLPParams.from_flat(bumped, d, h), X, y)[0]
        bumped[i] -= 2 * step
        down = loss_and_grad(MLPParams.from_flat(bumped, d, h), X, y)[0]
        numeric = (up - down) / (2 * step)
        denom = max(abs(numeric) + abs(grad[i]), 1e-8)
        worst = max(worst, abs(numeric - grad[i]) / denom)
    return worst


def save_checkpoint(model, path):
    d, h = model.params.shapes
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, d, h))
        fh.write(model.params.flat().astype("<f8").tobytes())


def load_checkpoint(path, problem=""):
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, d, h = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise DataError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    flat = np.frombuffer(raw[_CKPT_HEADER.size:], dtype="<f8")
    if len(flat) != d * h + h + 2 * h + 2:
        raise DataError(f"{path}: parameter block has wrong length")
    return BinaryClassifier(MLPParams.from_flat(flat.astype(np.float64), d, h),
                            problem)


class PatchMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU network head on frozen patch features.

    ``transform`` returns the hidden activations, so a fitted instance can sit
    in a pipeline as a feature encoder as well as a classifier.
    """

    def __init__(self, hidden=64, batch_size=512, learning_rate=1e-4, epochs=10,
                 random_state=0):
        self.hidden = hidden
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.model_ = train(X, y, self.hidden, self.batch_size, self.learning_rate,
                            self.epochs, self.random_state)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def _predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_array(X, dtype=np.float64))

    def predict(self, X):
        return self._predict(X).labels

    def predict_proba(self, X):
        return self._predict(X).softmax

    def transform(self, X):
        return self._predict(X).encoding
