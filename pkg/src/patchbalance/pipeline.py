"""Resumable run: ingest -> label -> cluster -> sample -> train -> fuse -> evaluate.

Every stage reads its inputs from the run directory and writes its outputs
back there. ``stages.json`` records, per stage, a checksum of the config
subset the stage depends on, checksums of its input files and checksums of
its outputs. A rerun skips a stage when all three still match; a recorded
output whose bytes changed is reported as corrupted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import classifiers
from .classifiers import PROBLEMS, Prediction
from .clustering import kmeans_fit
from .config import RunConfig
from .core import Partition, load_manifest, save_manifest
from .evaluation import (
    BalancedDataset,
    CVConfig,
    FoldPlan,
    MetricReport,
    bag_label,
    efficiency_report,
    fuse_fold,
    plan_for,
    score_report,
    slide_decision,
    submodel_reports,
    train_fold_models,
)
from .exceptions import DataError, IntegrityError, PatchBalanceError, StateError
from .features import (
    SyntheticSpec,
    generate_synthetic,
    l2_normalize,
    load_features,
    save_features,
)
from .fusion import FusionConfig
from .geometry import OverlapPolicy, census_from_counts, label_partitions
from .sampling import balance_partition

logger = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1
STAGES = ("ingest", "label", "cluster", "sample", "train", "fuse", "evaluate")
# negative pools sampled for each sub-problem, keyed by pool name
POOLS = {"B": ("B",), "C": ("C",), "BC": ("B", "C")}
POOL_OF = {"AvB": "B", "AvC": "C", "AvBC": "BC"}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _clean(obj):
    """Replace non-finite floats with None so JSON output stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2,
                                     allow_nan=False) + "\n")


def write_tsv(path, header, rows):
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tsv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return header, [line.split("\t") for line in lines[1:] if line]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _train_fold(job):
    return train_fold_models(*job)


class Pipeline:
    """One run directory driven by one :class:`RunConfig`."""

    def __init__(self, config, run_dir=None, strict=False):
        self.config = config.validate()
        self.dir = Path(run_dir or config.output_dir)
        self.strict = strict
        self._cache = {}

    # ------------------------------------------------------------------ paths
    def path(self, *parts):
        return self.dir.joinpath(*parts)

    def stage_config(self, stage):
        c = self.config
        cv = {"folds": c.evaluation.folds, "group_by_slide": c.evaluation.group_by_slide}
        subset = {
            "ingest": {"manifest": c.manifest, "features": c.features,
                       "synthetic": None if c.synthetic is None else asdict(c.synthetic),
                       "seed": c.seed},
            "label": {"overlap_threshold": c.overlap_threshold},
            "cluster": {"clustering": asdict(c.clustering), "seed": c.seed},
            "sample": {"sampling": asdict(c.sampling), "seed": c.seed},
            "train": {"classifier": asdict(c.classifier), "cv": cv, "seed": c.seed},
            "fuse": {"fusion": asdict(c.fusion), "seed": c.seed},
            "evaluate": {"evaluation": asdict(c.evaluation), "config": c.to_dict()},
        }[stage]
        subset["format_version"] = RUN_FORMAT_VERSION
        return hashlib.sha256(_canonical(subset).encode()).hexdigest()

    def stage_inputs(self, stage):
        c = self.config
        if stage == "ingest":
            if c.synthetic is not None:
                return []
            return [Path(c.manifest), Path(c.features)]
        pools = [f"clusters/{p}_{kind}.tsv" for p in POOLS
                 for kind in ("centroids", "assignment")]
        samples = [f"samples/{p}_ids.txt" for p in POOLS]
        rel = {
            "label": ["manifest.json"],
            "cluster": ["labels.tsv", "features.pbfv"],
            "sample": ["labels.tsv", "features.pbfv", *pools],
            "train": ["labels.tsv", "features.pbfv", *samples],
            "fuse": ["folds.tsv", *self._prediction_files()],
            "evaluate": ["manifest.json", "labels.tsv", "census.json",
                         "samples/summary.json", "folds.tsv",
                         *self._prediction_files(), *self._fused_files()],
        }[stage]
        return [self.path(r) for r in rel]

    def _prediction_files(self):
        k = self.config.evaluation.folds
        return [f"predictions/fold{f}_{p}.npy" for f in range(k) for p in PROBLEMS]

    def _fused_files(self):
        return [f"fused/{m}.tsv" for m in self.config.fusion.modes]

    # ---------------------------------------------------------------- records
    def _records(self):
        p = self.path("stages.json")
        if not p.exists():
            return {"format_version": RUN_FORMAT_VERSION, "stages": {}}
        try:
            rec = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"{p}: unreadable stage record") from exc
        if rec.get("format_version") != RUN_FORMAT_VERSION:
            raise IntegrityError(f"{p}: run directory format version mismatch")
        return rec

    def _save_records(self, rec):
        write_json(self.path("stages.json"), rec)

    def _input_hashes(self, stage):
        out = {}
        for p in self.stage_inputs(stage):
            if not p.exists():
                raise StateError(f"stage {stage!r} needs {p}, which does not exist")
            key = str(p.relative_to(self.dir)) if p.is_relative_to(self.dir) else str(p)
            out[key] = sha256_file(p)
        return out

    def is_fresh(self, stage, rec):
        """True when the recorded stage can be reused as is."""
        entry = rec["stages"].get(stage)
        if entry is None:
            return False
        same = (entry["config"] == self.stage_config(stage)
                and entry["inputs"] == self._input_hashes(stage))
        if not same:
            if self.strict:
                raise IntegrityError(
                    f"stage {stage!r}: config or input checksum changed (strict mode)")
            return False
        fresh = True
        for rel, digest in entry["outputs"].items():
            p = self.path(rel)
            if not p.exists():
                fresh = False
                continue
            if sha256_file(p) != digest:
                raise IntegrityError(f"{p}: checksum mismatch, file is corrupted")
        return fresh

    # ------------------------------------------------------------------ drive
    def run(self, stages=STAGES, resume=True):
        self.dir.mkdir(parents=True, exist_ok=True)
        rec = self._records()
        executed = []
        for stage in STAGES:
            if stage not in stages:
                continue
            if resume and self.is_fresh(stage, rec):
                logger.info("stage %s: up to date, skipped", stage)
                continue
            inputs = self._input_hashes(stage)
            logger.info("stage %s: running", stage)
            try:
                outputs = getattr(self, f"stage_{stage}")()
            except PatchBalanceError as exc:
                exc.stage = stage
                exc.args = (f"stage {stage!r} failed: {exc}",)
                raise
            rec["stages"][stage] = {
                "config": self.stage_config(stage),
                "inputs": inputs,
                "outputs": {str(o.relative_to(self.dir)): sha256_file(o)
                            for o in sorted(outputs)},
            }
            # later stages depend on this one; their records are re-validated
            self._save_records(rec)
            executed.append(stage)
        return executed

    # ------------------------------------------------------------ shared data
    def manifest(self):
        if "manifest" not in self._cache:
            self._cache["manifest"] = load_manifest(self.path("manifest.json"))
        return self._cache["manifest"]

    def features(self):
        if "features" not in self._cache:
            self._cache["features"] = l2_normalize(load_features(self.path("features.pbfv")))
        return self._cache["features"]

    def labels(self):
        if "labels" not in self._cache:
            _, rows = read_tsv(self.path("labels.tsv"))
            ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
            slides = np.array([r[1] for r in rows])
            parts = np.array([r[2] for r in rows])
            self._cache["labels"] = (ids, slides, parts)
        return self._cache["labels"]

    def pool_ids(self, pool):
        ids, _, parts = self.labels()
        return ids[np.isin(parts, POOLS[pool])]

    def balanced_dataset(self):
        ids, slides, parts = self.labels()
        positives = ids[parts == Partition.A.value]
        negatives = {p: np.array([int(x) for x in
                                  self.path(f"samples/{p}_ids.txt").read_text().split()],
                                 dtype=np.int64) for p in POOLS}
        rows = np.unique(np.concatenate([positives, *negatives.values()]))
        pos = np.searchsorted(ids, rows)
        return BalancedDataset(
            rows, self.features().rows(rows),
            (parts[pos] == Partition.A.value).astype(np.int64),
            parts[pos], slides[pos],
            {prob: np.isin(rows, negatives[POOL_OF[prob]]) for prob in PROBLEMS})

    def cv_config(self):
        c = self.config
        f = c.fusion
        return CVConfig(c.evaluation.folds, c.classifier.hidden, c.classifier.batch_size,
                        c.classifier.learning_rate, c.classifier.epochs,
                        FusionConfig(f.n_trees, f.max_depth, f.min_leaf,
                                     f.pca_retain, f.pca_cap),
                        tuple(f.modes), c.evaluation.group_by_slide)

    # ----------------------------------------------------------------- stages
    def stage_ingest(self):
        c = self.config
        out = [self.path("manifest.json"), self.path("features.pbfv")]
        if c.synthetic is not None:
            data = generate_synthetic(SyntheticSpec(**asdict(c.synthetic)), c.seed)
            save_manifest(data.manifest, out[0])
            save_features(data.features, out[1])
            truth = self.path("ground_truth.tsv")
            write_tsv(truth, ["patch_id", "partition"],
                      [(pid, part.value) for pid, part in sorted(data.truth.items())])
            out.append(truth)
        else:
            manifest = load_manifest(c.manifest)
            store = load_features(c.features, manifest)
            missing = sorted({p.patch_id for p in manifest.patches} - set(store.ids.tolist()))
            if missing:
                raise DataError(f"no feature vector for patch ids {missing[:5]}")
            save_manifest(manifest, out[0])
            shutil.copyfile(c.features, out[1])
        self._cache.clear()
        return out

    def stage_label(self):
        m = self.manifest()
        labeled = label_partitions(m.slides, m.patches,
                                   OverlapPolicy(self.config.overlap_threshold))
        write_tsv(self.path("labels.tsv"), ["patch_id", "slide_id", "partition"],
                  [(p.patch_id, p.slide_id, p.partition.value) for p in labeled])
        counts = {k: sum(p.partition.value == k for p in labeled) for k in "ABC"}
        census = census_from_counts(counts["A"], counts["B"], counts["C"])
        write_json(self.path("census.json"), census.to_dict())
        self._cache.pop("labels", None)
        return [self.path("labels.tsv"), self.path("census.json")]

    def stage_cluster(self):
        c = self.config.clustering
        self.path("clusters").mkdir(exist_ok=True)
        out = []
        for i, pool in enumerate(POOLS):
            ids = self.pool_ids(pool)
            model = kmeans_fit(self.features().rows(ids), c.k, self.config.seed,
                               c.max_iter, c.tol, ids=ids, stream_index=i,
                               n_init=c.n_init, refine=c.refine)
            cen = self.path("clusters", f"{pool}_centroids.tsv")
            asg = self.path("clusters", f"{pool}_assignment.tsv")
            write_tsv(cen, ["cluster"] + [f"f{j}" for j in range(model.centroids.shape[1])],
                      [(j, *row) for j, row in enumerate(model.centroids)])
            write_tsv(asg, ["patch_id", "cluster"], zip(ids.tolist(), model.labels.tolist()))
            out += [cen, asg]
        return out

    def _load_clusters(self, pool):
        _, rows = read_tsv(self.path("clusters", f"{pool}_centroids.tsv"))
        centroids = np.array([[float(v) for v in r[1:]] for r in rows])
        _, rows = read_tsv(self.path("clusters", f"{pool}_assignment.tsv"))
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
        return ids, labels, centroids

    def stage_sample(self):
        s = self.config.sampling
        ids_all, _, parts = self.labels()
        n_a = int(np.sum(parts == Partition.A.value))
        target = s.target if s.target is not None else n_a
        self.path("samples").mkdir(exist_ok=True)
        out, summary = [], {"target": target, "mode": s.mode, "weighting": s.weighting,
                            "bins": s.bins, "z_range": [s.z_min, s.z_max], "pools": {}}
        for i, pool in enumerate(POOLS):
            ids, labels, centroids = self._load_clusters(pool)
            sample, stats = balance_partition(
                self.features().rows(ids), ids, labels, centroids, target,
                s.weighting, s.mode, self.config.seed, s.bins, (s.z_min, s.z_max),
                stream_index=i)
            idp = self.path("samples", f"{pool}_ids.txt")
            idp.write_text("".join(f"{x}\n" for x in sample.ids.tolist()))
            rows = []
            for draw in sample.draws:
                for interval, n in sorted(draw.interval_counts.items()):
                    rows.append((draw.cluster, interval, s.z_min + interval,
                                 min(s.z_min + interval + 1, s.z_max), draw.budget, n))
            aud = self.path("samples", f"{pool}_audit.tsv")
            write_tsv(aud, ["cluster", "interval", "z_lo", "z_hi", "budget", "drawn"], rows)
            summary["pools"][pool] = {
                "source": int(len(ids)), "sampled": int(len(sample.ids)),
                "shortfall": bool(sample.shortfall),
                "budgets": [int(b) for b in sample.budgets],
                "dispersion_mean": [None if st is None else st.mean for st in stats],
                "dispersion_std": [None if st is None else st.std for st in stats],
                "round_robin_clusters": [d.cluster for d in sample.draws if d.round_robin],
            }
            out += [idp, aud]
        summary_path = self.path("samples", "summary.json")
        write_json(summary_path, summary)
        return out + [summary_path]

    def stage_train(self):
        cfg = self.cv_config()
        data = self.balanced_dataset()
        plan = plan_for(data, cfg.k, self.config.seed, cfg.group_by_slide)
        write_tsv(self.path("folds.tsv"), ["patch_id", "fold"],
                  zip(data.ids.tolist(), plan.fold.tolist()))
        self.path("models").mkdir(exist_ok=True)
        self.path("predictions").mkdir(exist_ok=True)
        out = [self.path("folds.tsv")]
        jobs = [(data, plan, f, cfg, self.config.seed) for f in range(cfg.k)]
        if self.config.workers > 1:
            # folds train independently from their own seed streams, so the
            # pool changes wall time only; results are consumed in fold order
            with ProcessPoolExecutor(min(self.config.workers, cfg.k)) as pool:
                trained = list(pool.map(_train_fold, jobs))
        else:
            trained = [_train_fold(job) for job in jobs]
        for f, models in enumerate(trained):
            for problem, model in zip(PROBLEMS, models):
                ck = self.path("models", f"fold{f}_{problem}.pbmd")
                classifiers.save_checkpoint(model, ck)
                pred = classifiers.predict(model, data.X)
                arr = np.column_stack([pred.labels, pred.softmax, pred.encoding])
                pp = self.path("predictions", f"fold{f}_{problem}.npy")
                np.save(pp, arr.astype("<f8"), allow_pickle=False)
                out += [ck, pp]
        return out

    def _fold_predictions(self, f):
        preds = []
        for problem in PROBLEMS:
            arr = np.load(self.path("predictions", f"fold{f}_{problem}.npy"),
                          allow_pickle=False)
            preds.append(Prediction(arr[:, 0].astype(np.int64), arr[:, 1:3], arr[:, 3:]))
        return preds

    def _folds(self):
        _, rows = read_tsv(self.path("folds.tsv"))
        return (np.array([int(r[0]) for r in rows], dtype=np.int64),
                np.array([int(r[1]) for r in rows], dtype=np.int64))

    def stage_fuse(self):
        cfg = self.cv_config()
        data = self.balanced_dataset()
        ids, fold = self._folds()
        if not np.array_equal(ids, data.ids):
            raise IntegrityError("folds.tsv does not match the balanced dataset")
        plan = FoldPlan(cfg.k, fold)
        rows = {m: [] for m in cfg.modes}
        for f in range(cfg.k):
            preds = self._fold_predictions(f)
            for mode, (held, yhat, score) in fuse_fold(data, plan, f, preds, cfg,
                                                       self.config.seed).items():
                rows[mode] += [(int(data.ids[r]), f, int(data.labels[r]), int(p), float(s))
                               for r, p, s in zip(held, yhat, score)]
        self.path("fused").mkdir(exist_ok=True)
        out = []
        for mode in cfg.modes:
            p = self.path("fused", f"{mode}.tsv")
            write_tsv(p, ["patch_id", "fold", "label", "predicted", "score"],
                      sorted(rows[mode]))
            out.append(p)
        return out

    def stage_evaluate(self):
        c = self.config
        cfg = self.cv_config()
        data = self.balanced_dataset()
        _, fold = self._folds()
        plan = FoldPlan(cfg.k, fold)

        subs = {p: MetricReport() for p in PROBLEMS}
        for f in range(cfg.k):
            for problem, rep in submodel_reports(data, plan, f,
                                                 self._fold_predictions(f)).items():
                subs[problem].add(rep)

        slide_of = dict(zip(data.ids.tolist(), data.slide.tolist()))
        slide_label = {s.slide_id: s.image_label for s in self.manifest().slides}
        fused, slide_level = {}, {}
        metric_rows = []
        for problem, rep in subs.items():
            metric_rows.append(("submodel", problem, rep))
        for mode in cfg.modes:
            _, rows = read_tsv(self.path("fused", f"{mode}.tsv"))
            pid = np.array([int(r[0]) for r in rows])
            fo = np.array([int(r[1]) for r in rows])
            y = np.array([int(r[2]) for r in rows])
            yhat = np.array([int(r[3]) for r in rows])
            score = np.array([float(r[4]) for r in rows])
            rep = MetricReport()
            for f in range(cfg.k):
                m = fo == f
                rep.add(score_report(yhat[m], score[m], y[m]))
            fused[mode] = rep
            metric_rows.append(("fusion", mode, rep))
            decisions = {}
            for sid in sorted(set(slide_of[p] for p in pid.tolist())):
                m = np.array([slide_of[p] == sid for p in pid.tolist()])
                decisions[sid] = slide_decision(yhat[m], c.evaluation.slide_threshold)
            correct = [decisions[s] == slide_label[s] for s in decisions]
            slide_level[mode] = {"accuracy": float(np.mean(correct)),
                                 "n_slides": len(decisions)}

        census = json.loads(self.path("census.json").read_text())
        summary = json.loads(self.path("samples", "summary.json").read_text())
        counts = census["counts"]
        balanced = counts["A"] + summary["pools"]["B"]["sampled"] \
            + summary["pools"]["C"]["sampled"]
        eff = efficiency_report(balanced, census["total"])

        ids_all, slides_all, parts_all = self.labels()
        bag_ok = all(
            bag_label((parts_all[slides_all == s.slide_id] == "A").astype(int))
            == s.image_label or not s.annotations
            for s in self.manifest().slides if np.any(slides_all == s.slide_id))

        report = {
            "format_version": RUN_FORMAT_VERSION,
            "config": c.to_dict(),
            "census": census,
            "sampling": summary,
            "efficiency": eff,
            "submodels": {p: r.to_dict() for p, r in subs.items()},
            "fusion": {m: r.to_dict() for m, r in fused.items()},
            "slide_level": slide_level,
            "bag_labels_consistent": bool(bag_ok),
            "notes": {
                "features": "l2-normalized vectors feed clustering, sampling and classifiers",
                "std": "population standard deviation across folds",
                "dispersion_mode": c.sampling.mode,
                "sampling_residual": "leftover budget is spent by a one-per-interval "
                                     "round-robin pass once the per-interval quota is 0",
                "folds": "stratified by partition and slide"
                         + (", whole slides per fold" if c.evaluation.group_by_slide else ""),
                "meta_classifier": "fit on training folds, scored on the held-out fold",
            },
        }
        write_json(self.path("report.json"), report)
        header = ["kind", "name", "metric", "mean", "std"]
        rows = []
        for kind, name, rep in metric_rows:
            mean, std = rep.mean(), rep.std()
            rows += [(kind, name, m, mean[m], std[m]) for m in mean]
        write_tsv(self.path("metrics.tsv"), header, rows)
        return [self.path("report.json"), self.path("metrics.tsv")]


def run_pipeline(config, run_dir=None, strict=False, resume=True):
    """Run (or resume) the whole stage sequence; returns the run directory."""
    pipe = Pipeline(config, run_dir, strict)
    pipe.run(STAGES, resume=resume)
    return pipe.dir

