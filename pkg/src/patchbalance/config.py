"""Run configuration: one JSON file, every field validated, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .fusion import MODES as FUSION_MODES
from .sampling import MODES as SAMPLING_MODES
from .sampling import WEIGHTINGS


@dataclass
class SyntheticSection:
    n_slides: int = 20
    patches_per_slide: int = 100
    d: int = 32
    tumor_fraction: float = 0.1
    n_latent_clusters: int = 3
    class_separation: float = 4.0
    patch_size: int = 256


@dataclass
class ClusteringSection:
    k: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    n_init: int = 10
    refine: bool = True


@dataclass
class SamplingSection:
    mode: str = "jsd"
    weighting: str = "dispersion"
    bins: int = 32
    z_min: float = -3.0
    z_max: float = 15.0
    target: int | None = None  # default: |A|


@dataclass
class ClassifierSection:
    hidden: int = 64
    batch_size: int = 512
    # 1e-4 suits fine-tuning a pretrained backbone; a freshly initialized
    # head on frozen features needs a much larger SGD step to train in 10 epochs
    learning_rate: float = 0.1
    epochs: int = 10


@dataclass
class FusionSection:
    modes: list = field(default_factory=lambda: list(FUSION_MODES))
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 2
    pca_retain: float = 0.95
    pca_cap: int = 64


@dataclass
class EvaluationSection:
    folds: int = 5
    group_by_slide: bool = False
    slide_threshold: float = 0.05


@dataclass
class RunConfig:
    manifest: str | None = None
    features: str | None = None
    synthetic: SyntheticSection | None = None
    overlap_threshold: float = 0.25
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seed: int = 0
    output_dir: str = "run"
    workers: int = 1

    def validate(self):
        for name in ("manifest", "features"):
            if getattr(self, name) is not None and not isinstance(getattr(self, name), str):
                raise ConfigError(f"{name} must be a path string")
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("give exactly one of 'manifest' or 'synthetic'")
        if self.manifest is not None and self.features is None:
            raise ConfigError("'features' is required with 'manifest'")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ConfigError("overlap_threshold must lie in [0, 1]")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        c = self.clustering
        if c.k < 1 or c.max_iter < 1 or c.tol < 0 or c.n_init < 1:
            raise ConfigError("clustering: need k, max_iter, n_init >= 1 and tol >= 0")
        s = self.sampling
        if s.mode not in SAMPLING_MODES:
            raise ConfigError(f"sampling.mode must be one of {SAMPLING_MODES}")
        if s.weighting not in WEIGHTINGS:
            raise ConfigError(f"sampling.weighting must be one of {WEIGHTINGS}")
        if s.bins < 2:
            raise ConfigError("sampling.bins must be at least 2")
        if not s.z_max > s.z_min:
            raise ConfigError("sampling.z_max must exceed sampling.z_min")
        if s.target is not None and (isinstance(s.target, bool)
                                     or not isinstance(s.target, int) or s.target < 1):
            raise ConfigError("sampling.target must be positive")
        k = self.classifier
        if k.hidden < 1 or k.batch_size < 1 or k.epochs < 1 or k.learning_rate <= 0:
            raise ConfigError("classifier hyperparameters must be positive")
        f = self.fusion
        bad = [m for m in f.modes if m not in FUSION_MODES]
        if bad or not f.modes:
            raise ConfigError(f"fusion.modes must be a non-empty subset of {FUSION_MODES}")
        if f.n_trees < 1 or f.max_depth < 1 or f.min_leaf < 1 or f.pca_cap < 1:
            raise ConfigError("fusion: n_trees, max_depth, min_leaf, pca_cap must be >= 1")
        if not 0.0 < f.pca_retain <= 1.0:
            raise ConfigError("fusion.pca_retain must lie in (0, 1]")
        e = self.evaluation
        if e.folds < 2:
            raise ConfigError("evaluation.folds must be at least 2")
        if not 0.0 <= e.slide_threshold <= 1.0:
            raise ConfigError("evaluation.slide_threshold must lie in [0, 1]")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {
    "synthetic": SyntheticSection,
    "clustering": ClusteringSection,
    "sampling": SamplingSection,
    "classifier": ClassifierSection,
    "fusion": FusionSection,
    "evaluation": EvaluationSection,
}


def _coerce(value, default, where):
    """Check ``value`` against the type of the field default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
    return value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    obj = cls()
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        if name in _SECTIONS and cls is RunConfig:
            value = None if value is None else _build(_SECTIONS[name], value, path)
        else:
            value = _coerce(value, getattr(obj, name), path)
        setattr(obj, name, value)
    return obj


def config_from_dict(data):
    return _build(RunConfig, data, "").validate()


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def apply_overrides(data, overrides):
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} does not address a section")
        node[parts[-1]] = value
    return data
