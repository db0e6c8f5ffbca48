"""Command line entry point: ``patchbalance <command> [flags]``.

Every stage command runs the pipeline up to and including that stage in a
run directory, reusing up-to-date earlier stages. Exit codes: 0 success,
1 usage or configuration error, 2 data error, 3 infeasible configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, classifiers
from .config import apply_overrides, config_from_dict
from .evaluation import format_efficiency
from .exceptions import ConfigError, PatchBalanceError
from .features import SyntheticSpec, generate_synthetic, save_features
from .core import save_manifest
from .pipeline import POOL_OF, STAGES, Pipeline, write_tsv

logger = logging.getLogger("patchbalance")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--manifest", help="slide/patch manifest (JSON)")
    p.add_argument("--features", help="feature vectors (PBFV binary)")
    p.add_argument("--synthetic", action="store_true",
                   help="generate synthetic data instead of reading a manifest")
    p.add_argument("--run-dir", help="run directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--workers", type=int, help="process count for fold training")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config field; repeatable")
    p.add_argument("--strict", action="store_true",
                   help="abort when a finished stage's config or inputs changed")
    p.add_argument("--fresh", action="store_true", help="ignore recorded stages")


def build_parser():
    parser = _Parser(prog="patchbalance",
                     description="Divide-and-conquer balancing of WSI patch data.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic manifest and feature file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    for name, default in asdict(SyntheticSpec()).items():
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)

    p = sub.add_parser("label", help="partition patches into A/B/C")
    _common(p)
    p.add_argument("--threshold", type=float, help="minimum tumor overlap fraction")

    p = sub.add_parser("cluster", help="k-means on the B, C and B+C pools")
    _common(p)
    p.add_argument("--k", type=int, help="clusters per pool")

    p = sub.add_parser("sample", help="dispersion-stratified undersampling")
    _common(p)
    p.add_argument("--target", type=int, help="sample size per pool (default |A|)")
    p.add_argument("--mode", choices=["jsd", "euclidean"])
    p.add_argument("--weighting", choices=["dispersion", "equal"])
    p.add_argument("--bins", type=int)
    p.add_argument("--z-min", type=float)
    p.add_argument("--z-max", type=float)

    p = sub.add_parser("train", help="train the sub-problem classifiers")
    _common(p)
    p.add_argument("--problem", choices=[x.lower() for x in classifiers.PROBLEMS],
                   help="train one model on the whole balanced set instead of per fold")

    p = sub.add_parser("fuse", help="fit fusion meta-classifiers per fold")
    _common(p)
    p.add_argument("--mode", action="append", choices=["m0", "m1", "m2", "m3", "m4"],
                   help="fusion mode; repeatable (default: all)")

    p = sub.add_parser("evaluate", help="write report.json and metrics.tsv")
    _common(p)

    p = sub.add_parser("run", help="run every stage")
    _common(p)
    return parser


def _config_data(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON at line {exc.lineno}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    if args.manifest:
        data["manifest"] = args.manifest
        data.pop("synthetic", None)
    if args.features:
        data["features"] = args.features
    if args.synthetic:
        data.setdefault("synthetic", {})
        data.pop("manifest", None)
        data.pop("features", None)
    for key in ("seed", "workers"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    flags = {
        "threshold": ("overlap_threshold",), "k": ("clustering", "k"),
        "target": ("sampling", "target"), "bins": ("sampling", "bins"),
        "z_min": ("sampling", "z_min"), "z_max": ("sampling", "z_max"),
        "weighting": ("sampling", "weighting"),
    }
    if args.command == "sample" and args.mode is not None:
        data.setdefault("sampling", {})["mode"] = args.mode
    if args.command == "fuse" and args.mode:
        data.setdefault("fusion", {})["modes"] = sorted(set(args.mode))
    for flag, where in flags.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = data
        for part in where[:-1]:
            node = node.setdefault(part, {})
        node[where[-1]] = value
    return apply_overrides(data, args.set)


def cmd_synth(args):
    fields = asdict(SyntheticSpec())
    spec = SyntheticSpec(**{k: getattr(args, k) for k in fields})
    data = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(data.manifest, out / "manifest.json")
    save_features(data.features, out / "features.pbfv")
    write_tsv(out / "ground_truth.tsv", ["patch_id", "partition"],
              [(pid, part.value) for pid, part in sorted(data.truth.items())])
    print(f"wrote {len(data.manifest.patches)} patches to {out}")


def _train_full(pipe, problem):
    """One model per problem on every balanced row (no held-out fold)."""
    data = pipe.balanced_dataset()
    cfg = pipe.cv_config()
    rows = data.problem_rows(problem)
    model = classifiers.train(data.X[rows], data.labels[rows], cfg.hidden,
                              cfg.batch_size, cfg.learning_rate, cfg.epochs,
                              pipe.config.seed, problem,
                              stream_index=1000 + classifiers.PROBLEMS.index(problem))
    pipe.path("models").mkdir(exist_ok=True)
    path = pipe.path("models", f"full_{problem}.pbmd")
    classifiers.save_checkpoint(model, path)
    acc = model.log.accuracy[-1] if model.log.accuracy else float("nan")
    print(f"{problem}: trained on {int(rows.sum())} patches "
          f"(negatives from {POOL_OF[problem]}), training accuracy {acc:.4f} -> {path}")


def cmd_stage(args):
    config = config_from_dict(_config_data(args))
    pipe = Pipeline(config, args.run_dir, strict=args.strict)
    if args.command == "train" and args.problem:
        pipe.run(STAGES[:STAGES.index("sample") + 1], resume=not args.fresh)
        problem = {p.lower(): p for p in classifiers.PROBLEMS}[args.problem]
        _train_full(pipe, problem)
        return
    last = "evaluate" if args.command == "run" else args.command
    done = pipe.run(STAGES[:STAGES.index(last) + 1], resume=not args.fresh)
    print(f"run directory {pipe.dir}: ran {', '.join(done) or 'nothing (up to date)'}")
    if last == "evaluate":
        report = json.loads(pipe.path("report.json").read_text())
        print(format_efficiency(report["efficiency"]))
        for mode, rep in report["fusion"].items():
            m = rep["mean"]
            auc = "nan" if m["auc"] is None else f"{m['auc']:.4f}"
            print(f"{mode}: accuracy {m['accuracy']:.4f} auc {auc} f1 {m['f1']:.4f}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args)
        else:
            cmd_stage(args)
    except PatchBalanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:  # argument values rejected by a constructor
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
