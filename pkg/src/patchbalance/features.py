"""Feature-vector storage, the PBFV binary format, and synthetic data."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_PATCH_SIZE,
    AnnotationRegion,
    Manifest,
    Partition,
    PatchRecord,
    SlideRecord,
    rng_stream,
)
from .exceptions import ConfigError, DataError, NormalizationError, ShapeError

MAGIC = b"PBFV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True)
class FeatureStore:
    """Immutable mapping of patch ids to equal-length feature vectors.

    ``ids`` is sorted ascending and ``values`` holds float64 rows in the same
    order. On disk values are float32.
    """

    ids: np.ndarray
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or len(ids) != len(values):
            raise ShapeError("values must be (n, d) with one row per id")
        order = np.argsort(ids, kind="stable")
        ids, values = ids[order], values[order]
        if len(ids) > 1 and np.any(ids[1:] == ids[:-1]):
            dup = int(ids[1:][ids[1:] == ids[:-1]][0])
            raise DataError(f"duplicate patch_id {dup}")
        ids.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.ids)

    def rows(self, patch_ids):
        """Feature rows for ``patch_ids`` in the given order."""
        patch_ids = np.asarray(patch_ids, dtype=np.int64)
        idx = np.searchsorted(self.ids, patch_ids)
        idx = np.clip(idx, 0, max(len(self.ids) - 1, 0))
        if len(self.ids) == 0 or np.any(self.ids[idx] != patch_ids):
            missing = patch_ids[(len(self.ids) == 0) | (self.ids[idx] != patch_ids)]
            raise DataError(f"no features for patch ids {missing[:5].tolist()}")
        return self.values[idx]


def save_features(store, path):
    n, d = store.values.shape
    rec = np.empty(n, dtype=[("id", "<u8"), ("v", "<f4", (d,))])
    rec["id"] = store.ids
    rec["v"] = store.values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, d))
        fh.write(rec.tobytes())


def load_features(path, manifest=None):
    """Read a PBFV file. With ``manifest``, ids must all be known patches."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if d == 0:
        raise DataError(f"{path}: zero dimension")
    body = raw[_HEADER.size:]
    rec_size = 8 + 4 * d
    if len(body) != n * rec_size:
        if n and len(body) % n == 0 and (len(body) // n - 8) % 4 == 0:
            raise ShapeError(
                f"{path}: records have dimension {(len(body) // n - 8) // 4}, "
                f"header says {d}")
        raise DataError(f"{path}: expected {n} records of {rec_size} bytes, "
                        f"got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=[("id", "<u8"), ("v", "<f4", (d,))], count=n)
    ids = rec["id"].astype(np.int64)
    values = rec["v"].astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite feature values")
    store = FeatureStore(ids, values)
    if manifest is not None:
        known = np.array(sorted(p.patch_id for p in manifest.patches), dtype=np.int64)
        unknown = np.setdiff1d(store.ids, known)
        if len(unknown):
            raise DataError(f"{path}: unknown patch ids {unknown[:5].tolist()}")
    return store


def l2_normalize(store):
    """Scale every vector to unit Euclidean norm."""
    norms = np.linalg.norm(store.values, axis=1)
    zero = norms == 0
    if zero.any():
        raise NormalizationError(
            f"cannot normalize zero vector for patch_id {int(store.ids[zero][0])}")
    return FeatureStore(store.ids, store.values / norms[:, None], normalized=True)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_slides: int = 20
    patches_per_slide: int = 100
    d: int = 32
    tumor_fraction: float = 0.1
    n_latent_clusters: int = 3
    class_separation: float = 4.0
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if self.n_slides < 2:
            raise ConfigError("n_slides must be at least 2")
        if self.patches_per_slide < 1 or self.d < 1 or self.patch_size < 1:
            raise ConfigError("patches_per_slide, d and patch_size must be positive")
        if not 0.0 < self.tumor_fraction < 1.0:
            raise ConfigError("tumor_fraction must lie strictly between 0 and 1")
        if self.n_latent_clusters < 1:
            raise ConfigError("n_latent_clusters must be at least 1")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be nonnegative")

    @property
    def n_cancerous(self):
        return self.n_slides // 2

    @property
    def tumor_per_slide(self):
        return max(1, int(round(self.tumor_fraction * self.patches_per_slide)))


@dataclass(frozen=True)
class SyntheticData:
    manifest: Manifest
    features: FeatureStore
    truth: dict  # patch_id -> Partition


def _row_runs(cells):
    """Group (row, col) grid cells into maximal horizontal runs."""
    runs = []
    for r, c in sorted(cells):
        if runs and runs[-1][0] == r and runs[-1][2] == c - 1:
            runs[-1][2] = c
        else:
            runs.append([r, c, c])
    return runs


def generate_synthetic(spec, seed):
    """Build a manifest, Gaussian-mixture features and ground-truth partitions.

    The first ``n_slides // 2`` slides are cancerous. In each, a random
    ``tumor_per_slide`` grid cells are tumor and get annotation rectangles
    that tile exactly those cells. Tumor features come from one set of
    latent Gaussian components, benign features (B and C alike) from
    another, with class means ``class_separation`` standard deviations apart.
    """
    rng = rng_stream(seed, "synthetic")
    ps = spec.patch_size
    cols = int(np.ceil(np.sqrt(spec.patches_per_slide)))
    rows = int(np.ceil(spec.patches_per_slide / cols))

    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)

    def component_means(sign):
        offsets = rng.standard_normal((spec.n_latent_clusters, spec.d)) * 1.5
        offsets -= np.outer(offsets @ direction, direction)
        return offsets + sign * 0.5 * spec.class_separation * direction

    tumor_means = component_means(+1.0)
    benign_means = component_means(-1.0)

    slides, patches, truth = [], [], {}
    feats = np.empty((spec.n_slides * spec.patches_per_slide, spec.d))
    pid = 0
    for s in range(spec.n_slides):
        sid = f"s{s:04d}"
        cancerous = s < spec.n_cancerous
        tumor_cells = set()
        if cancerous:
            picks = rng.choice(spec.patches_per_slide, spec.tumor_per_slide,
                               replace=False)
            tumor_cells = {(int(i) // cols, int(i) % cols) for i in picks}
        regions = []
        for r, c0, c1 in _row_runs(tumor_cells):
            x1, y1, x2, y2 = c0 * ps, r * ps, (c1 + 1) * ps, (r + 1) * ps
            regions.append(AnnotationRegion(((x1, y1), (x2, y1), (x2, y2), (x1, y2))))
        slides.append(SlideRecord(sid, int(cancerous), cols * ps, rows * ps,
                                  tuple(regions)))
        n = spec.patches_per_slide
        tumor = np.zeros(n, dtype=bool)
        for r, c in tumor_cells:
            tumor[r * cols + c] = True
        comp = rng.integers(spec.n_latent_clusters, size=n)
        means = np.where(tumor[:, None], tumor_means[comp], benign_means[comp])
        feats[pid:pid + n] = means + rng.standard_normal((n, spec.d))
        benign_part = Partition.B if cancerous else Partition.C
        for i in range(n):
            r, c = divmod(i, cols)
            patches.append(PatchRecord(pid, sid, ((c * ps, r * ps),
                                                  ((c + 1) * ps, (r + 1) * ps))))
            truth[pid] = Partition.A if tumor[i] else benign_part
            pid += 1
    # round through float32 so in-memory and on-disk features agree exactly
    feats = feats.astype(np.float32).astype(np.float64)
    manifest = Manifest(tuple(slides), tuple(patches), ps, 10.0)
    return SyntheticData(manifest, FeatureStore(np.arange(pid), feats), truth)
