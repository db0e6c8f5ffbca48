"""Domain records, manifest I/O and seeded random streams."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import (
    DataError,
    DegeneratePolygonError,
    GeometryError,
    ManifestParseError,
    ReferentialIntegrityError,
)

MANIFEST_FORMAT = "patchbalance-manifest"
MANIFEST_VERSION = 1
DEFAULT_PATCH_SIZE = 256


class Partition(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    UNLABELED = "U"

    @property
    def patch_label(self):
        if self is Partition.UNLABELED:
            return None
        return 1 if self is Partition.A else 0


Rect = tuple  # ((x1, y1), (x2, y2)), integer pixel coordinates


def bbox_of_polygon(polygon):
    """Tight axis-aligned bounding box ``((x1, y1), (x2, y2))`` of a vertex list."""
    pts = [(int(x), int(y)) for x, y in polygon]
    if len(pts) < 3:
        raise DegeneratePolygonError(
            f"polygon needs at least 3 vertices, got {len(pts)}")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return (min(xs), min(ys)), (max(xs), max(ys))


def check_rect(rect, what="rectangle"):
    (x1, y1), (x2, y2) = rect
    if not (x1 < x2 and y1 < y2):
        raise GeometryError(f"malformed {what} {rect!r}: need x1<x2 and y1<y2")
    return rect


@dataclass(frozen=True)
class AnnotationRegion:
    polygon: tuple
    bbox: Rect = field(init=False)

    def __post_init__(self):
        poly = tuple((int(x), int(y)) for x, y in self.polygon)
        bbox = bbox_of_polygon(poly)
        check_rect(bbox, "annotation bounding box")
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "bbox", bbox)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    image_label: int
    width_px: int
    height_px: int
    annotations: tuple = ()

    def __post_init__(self):
        if self.image_label not in (0, 1):
            raise DataError(f"slide {self.slide_id}: label must be 0 or 1")
        if self.image_label == 0 and self.annotations:
            raise DataError(
                f"slide {self.slide_id}: benign slide carries annotations")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    slide_id: str
    rect: Rect
    partition: Partition = Partition.UNLABELED

    @property
    def patch_label(self):
        return self.partition.patch_label

    def with_partition(self, partition):
        return replace(self, partition=Partition(partition))


@dataclass(frozen=True)
class Manifest:
    slides: tuple
    patches: tuple
    patch_size: int = DEFAULT_PATCH_SIZE
    magnification: float = 10.0

    def slide_index(self):
        return {s.slide_id: s for s in self.slides}


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------

# Each module draws from its own child stream of the run seed:
#   SeedSequence(entropy=seed, spawn_key=(STREAMS[module], index))
# ``index`` distinguishes repeated invocations inside one module (fold number,
# cluster index, tree index, ...). Adding a module appends to this table so
# existing streams never shift.
STREAMS = {
    "synthetic": 1,
    "clustering": 2,
    "sampling": 3,
    "classifiers": 4,
    "fusion": 5,
    "evaluation": 6,
    "forest": 7,
}


def rng_stream(seed, module, *index):
    """Return an independent ``numpy.random.Generator`` for ``module``."""
    if module not in STREAMS:
        raise KeyError(f"unknown random stream {module!r}")
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise DataError("seed must be an unsigned 64-bit integer")
    key = (STREAMS[module],) + tuple(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=key)))


def child_seed(rng):
    """Draw a 64-bit seed from ``rng`` for a nested component."""
    return int(rng.integers(0, 2 ** 63, dtype=np.int64))


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def _need(record, key, kind, index):
    if key not in record:
        raise ManifestParseError(f"missing field {key!r}", index)
    value = record[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ManifestParseError(f"field {key!r} must be an integer", index)
    elif not isinstance(value, kind):
        raise ManifestParseError(
            f"field {key!r} must be {kind.__name__}", index)
    return value


def manifest_from_dict(doc):
    if not isinstance(doc, dict):
        raise ManifestParseError("manifest root must be an object")
    if doc.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ManifestParseError(f"unexpected format {doc.get('format')!r}")
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestParseError(f"unsupported version {doc.get('version')!r}")
    patch_size = _need(doc, "patch_size", int, None)
    if patch_size <= 0:
        raise ManifestParseError("patch_size must be positive")
    magnification = doc.get("magnification", 10.0)
    if not isinstance(magnification, (int, float)) or magnification <= 0:
        raise ManifestParseError("magnification must be a positive number")

    slides = []
    seen = set()
    for i, rec in enumerate(_need(doc, "slides", list, None)):
        if not isinstance(rec, dict):
            raise ManifestParseError("slide record must be an object", f"slides[{i}]")
        where = f"slides[{i}]"
        sid = _need(rec, "slide_id", str, where)
        if sid in seen:
            raise ManifestParseError(f"duplicate slide_id {sid!r}", where)
        seen.add(sid)
        width = _need(rec, "width", int, where)
        height = _need(rec, "height", int, where)
        if width < patch_size or height < patch_size:
            raise ManifestParseError("slide smaller than one patch", where)
        regions = []
        for poly in rec.get("annotations", []):
            try:
                regions.append(AnnotationRegion(tuple(tuple(v) for v in poly)))
            except (TypeError, ValueError) as exc:
                raise ManifestParseError(f"bad annotation: {exc}", where) from exc
        try:
            slides.append(SlideRecord(sid, _need(rec, "label", int, where),
                                      width, height, tuple(regions)))
        except DataError as exc:
            raise ManifestParseError(str(exc), where) from exc

    by_id = {s.slide_id: s for s in slides}
    patches = []
    seen_patch = set()
    for i, rec in enumerate(_need(doc, "patches", list, None)):
        where = f"patches[{i}]"
        if not isinstance(rec, dict):
            raise ManifestParseError("patch record must be an object", where)
        pid = _need(rec, "patch_id", int, where)
        if pid < 0 or pid in seen_patch:
            raise ManifestParseError(f"invalid or duplicate patch_id {pid}", where)
        seen_patch.add(pid)
        sid = _need(rec, "slide_id", str, where)
        p1 = _need(rec, "p1", int, where)
        q1 = _need(rec, "q1", int, where)
        slide = by_id.get(sid)
        if slide is None:
            raise ReferentialIntegrityError(
                f"{where}: patch {pid} references unknown slide {sid!r}")
        rect = ((p1, q1), (p1 + patch_size, q1 + patch_size))
        if p1 < 0 or q1 < 0 or p1 + patch_size > slide.width_px \
                or q1 + patch_size > slide.height_px:
            raise GeometryError(
                f"patch {pid} at {rect} lies outside slide {sid!r} "
                f"({slide.width_px}x{slide.height_px})")
        patches.append(PatchRecord(pid, sid, rect))
    patches.sort(key=lambda p: p.patch_id)
    return Manifest(tuple(slides), tuple(patches), patch_size, float(magnification))


def manifest_to_dict(manifest):
    slides = []
    for s in manifest.slides:
        slides.append({
            "slide_id": s.slide_id,
            "label": s.image_label,
            "width": s.width_px,
            "height": s.height_px,
            "annotations": [[list(v) for v in r.polygon] for r in s.annotations],
        })
    patches = [{"patch_id": p.patch_id, "slide_id": p.slide_id,
                "p1": p.rect[0][0], "q1": p.rect[0][1]}
               for p in manifest.patches]
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "patch_size": manifest.patch_size,
        "magnification": manifest.magnification,
        "slides": slides,
        "patches": patches,
    }


def load_manifest(path):
    """Read a manifest file; all patches come back ``Unlabeled``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestParseError(
            f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return manifest_from_dict(doc)


def save_manifest(manifest, path):
    text = json.dumps(manifest_to_dict(manifest), separators=(",", ":"))
    Path(path).write_text(text + "\n")
