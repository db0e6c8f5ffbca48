"""Metrics, fold plans, bag/slide decisions and cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import classifiers
from .fusion import MODES as FUSION_MODES
from .fusion import FusionClassifier, FusionConfig, FusionInput
from .core import rng_stream
from .exceptions import ConfigError, FoldError, MetricError, ShapeError, StateError

logger = logging.getLogger(__name__)

METRICS = ("accuracy", "auc", "precision", "recall", "f1")


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _binary_pair(pred, labels):
    pred = np.asarray(pred).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    if pred.shape != labels.shape:
        raise ShapeError(f"length mismatch: {pred.shape} vs {labels.shape}")
    return pred, labels


def confusion_metrics(pred, labels):
    """Accuracy, precision, recall and F1 from a binary confusion matrix.

    Precision is 0 with no positive predictions, recall is 0 with no positive
    labels, F1 is 0 when both are 0.
    """
    pred, labels = _binary_pair(pred, labels)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    n = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / n if n else 0.0, "precision": precision,
            "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn, "tn": tn}


def auc_score(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ShapeError(f"length mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_report(pred, scores, labels):
    out = confusion_metrics(pred, labels)
    try:
        out["auc"] = auc_score(scores, labels)
    except MetricError:
        out["auc"] = float("nan")
    return {m: out[m] for m in METRICS}


@dataclass
class MetricReport:
    folds: list = field(default_factory=list)  # one metric dict per fold

    def add(self, metrics):
        self.folds.append({m: float(metrics[m]) for m in METRICS})

    def mean(self):
        return {m: float(np.mean([f[m] for f in self.folds])) for m in METRICS}

    def std(self):
        # population std across folds
        return {m: float(np.std([f[m] for f in self.folds])) for m in METRICS}

    def to_dict(self):
        return {"folds": self.folds, "mean": self.mean(), "std": self.std()}


# --------------------------------------------------------------------------
# MIL decisions
# --------------------------------------------------------------------------

def bag_label(instance_labels):
    """0 iff every instance label is 0."""
    y = np.asarray(instance_labels)
    if y.size == 0:
        raise StateError("bag is empty")
    return int(np.any(y != 0))


def slide_decision(patch_predictions, threshold=0.05):
    """1 iff the fraction of tumor-predicted patches reaches ``threshold``.

    Any threshold in (0, 1/n] reproduces the any-positive bag rule.
    """
    y = np.asarray(patch_predictions)
    if y.size == 0:
        raise StateError("slide has no patches")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    return int(np.mean(y != 0) >= threshold)


def efficiency_report(balanced, unbalanced):
    """Share of the unbalanced data kept, and the implied speedup."""
    if unbalanced <= 0:
        raise ConfigError("unbalanced size must be positive")
    ratio = balanced / unbalanced
    out = {"balanced": int(balanced), "unbalanced": int(unbalanced),
           "reduction": ratio, "reduction_pct": round(100.0 * ratio, 2),
           "speedup": (unbalanced / balanced) if balanced else float("inf"),
           "empty_sample": balanced == 0}
    if balanced == 0:
        logger.warning("balanced sample is empty")
    return out


def format_efficiency(report):
    speed = report["speedup"]
    speed_txt = f"{speed:.1f}x" if np.isfinite(speed) else "n/a"
    return (f"balanced {report['balanced']:,} of {report['unbalanced']:,} patches: "
            f"reduction {report['reduction_pct']:.2f}%, speedup {speed_txt}")


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    fold: np.ndarray  # fold index per row

    def train_mask(self, f):
        return self.fold != f

    def test_mask(self, f):
        return self.fold == f


def make_fold_plan(strata, k=5, seed=0, groups=None):
    """Stratified fold assignment.

    Without ``groups`` rows are shuffled within each stratum and dealt
    round-robin, continuing the deal across strata, so every fold holds
    within one row of its share of each stratum. With ``groups`` whole groups
    (e.g. slides) are dealt instead, largest first, to the fold currently
    holding the fewest rows of that group's stratum.
    """
    strata = np.asarray(strata)
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if len(strata) < k:
        raise FoldError(f"{len(strata)} rows cannot fill {k} folds")
    rng = rng_stream(seed, "evaluation")
    fold = np.full(len(strata), -1, dtype=np.int64)
    if groups is None:
        offset = 0
        for s in sorted(set(strata.tolist())):
            rows = rng.permutation(np.flatnonzero(strata == s))
            fold[rows] = (offset + np.arange(len(rows))) % k
            offset += len(rows)
        return FoldPlan(k, fold)
    groups = np.asarray(groups)
    for s in sorted(set(strata.tolist())):
        in_s = strata == s
        load = np.zeros(k, dtype=np.int64)
        names = sorted(set(groups[in_s].tolist()))
        sizes = {g: int(np.sum(in_s & (groups == g))) for g in names}
        shuffled = [names[i] for i in rng.permutation(len(names))]
        for g in sorted(shuffled, key=lambda g: -sizes[g]):
            f = int(np.argmin(load))
            fold[in_s & (groups == g)] = f
            load[f] += sizes[g]
    return FoldPlan(k, fold)


# --------------------------------------------------------------------------
# cross-validation of the full decomposition
# --------------------------------------------------------------------------

@dataclass
class BalancedDataset:
    """Union of A and the sampled B', C' and (B+C)' sets.

    ``negatives`` maps problem name -> boolean mask of rows serving as that
    problem's negatives; ``labels`` is 1 for A.
    """

    ids: np.ndarray
    X: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    slide: np.ndarray
    negatives: dict

    def problem_rows(self, problem):
        return (self.labels == 1) | self.negatives[problem]


@dataclass
class CVConfig:
    k: int = 5
    hidden: int = 64
    batch_size: int = 512
    learning_rate: float = 1e-4
    epochs: int = 10
    fusion: FusionConfig = field(default_factory=FusionConfig)
    modes: tuple = FUSION_MODES
    group_by_slide: bool = False


def plan_for(dataset, k, seed, group_by_slide=False):
    strata = dataset.partition.astype(str)
    if not group_by_slide:
        strata = np.char.add(np.char.add(strata, "|"), dataset.slide.astype(str))
        plan = make_fold_plan(strata, k, seed)
    else:
        plan = make_fold_plan(dataset.partition.astype(str), k, seed,
                              groups=dataset.slide)
    for f in range(k):
        held = dataset.labels[plan.test_mask(f)]
        if held.size == 0 or held.min() == held.max():
            raise FoldError(f"fold {f} does not contain both classes")
    return plan


def train_fold_models(dataset, plan, f, cfg, seed):
    """Train the three sub-models on the training part of fold ``f``."""
    train_rows = plan.train_mask(f)
    models = []
    for i, problem in enumerate(classifiers.PROBLEMS):
        rows = train_rows & dataset.problem_rows(problem)
        models.append(classifiers.train(
            dataset.X[rows], dataset.labels[rows], cfg.hidden, cfg.batch_size,
            cfg.learning_rate, cfg.epochs, seed, problem,
            stream_index=f * len(classifiers.PROBLEMS) + i))
    return models


def submodel_reports(dataset, plan, f, preds):
    """Held-out metrics of each sub-model on its own problem."""
    held = plan.test_mask(f)
    out = {}
    for problem, p in zip(classifiers.PROBLEMS, preds):
        rows = held & dataset.problem_rows(problem)
        out[problem] = score_report(p.labels[rows], p.scores[rows],
                                    dataset.labels[rows])
    return out


def fuse_fold(dataset, plan, f, preds, cfg, seed):
    """Fit every fusion mode on the training rows and predict the held-out rows.

    Returns ``{mode: (held-out row indices, labels, scores)}``.
    """
    F = FusionInput.from_predictions(preds)
    train_rows = np.flatnonzero(plan.train_mask(f))
    held = np.flatnonzero(plan.test_mask(f))
    out = {}
    for mode in cfg.modes:
        fc = cfg.fusion
        clf = FusionClassifier(mode, fc.n_trees, fc.max_depth, fc.min_leaf,
                                      fc.pca_retain, fc.pca_cap, seed)
        clf.fit(F.subset(train_rows), dataset.labels[train_rows],
                stream_index=f * len(FUSION_MODES) + FUSION_MODES.index(mode))
        Fh = F.subset(held)
        out[mode] = (held, clf.predict(Fh), clf.predict_proba(Fh)[:, 1])
    return out


@dataclass
class CVResult:
    submodels: dict   # problem -> MetricReport
    fusion: dict      # mode -> MetricReport

    def to_dict(self):
        return {"submodels": {k: v.to_dict() for k, v in self.submodels.items()},
                "fusion": {k: v.to_dict() for k, v in self.fusion.items()}}


def cross_validate(dataset, cfg=None, seed=0):
    """k-fold evaluation of the three sub-models and every fusion mode."""
    cfg = cfg or CVConfig()
    plan = plan_for(dataset, cfg.k, seed, cfg.group_by_slide)
    subs = {p: MetricReport() for p in classifiers.PROBLEMS}
    fused = {m: MetricReport() for m in cfg.modes}
    for f in range(cfg.k):
        models = train_fold_models(dataset, plan, f, cfg, seed)
        preds = [classifiers.predict(m, dataset.X) for m in models]
        for problem, rep in submodel_reports(dataset, plan, f, preds).items():
            subs[problem].add(rep)
        for mode, (rows, yhat, score) in fuse_fold(dataset, plan, f, preds, cfg,
                                                   seed).items():
            fused[mode].add(score_report(yhat, score, dataset.labels[rows]))
    return CVResult(subs, fused)
