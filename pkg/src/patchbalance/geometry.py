"""Rectangle overlap and A/B/C partition labeling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Partition, check_rect
from .exceptions import ConfigError, GeometryError, StateError

logger = logging.getLogger(__name__)

DEFAULT_OVERLAP_THRESHOLD = 0.25


@dataclass(frozen=True)
class OverlapPolicy:
    """Minimum fraction of a patch's area that must fall in a tumor box.

    The default of 0.25 is a project choice; no canonical value exists.
    """

    threshold: float = DEFAULT_OVERLAP_THRESHOLD

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(
                f"overlap threshold must lie in [0, 1], got {self.threshold}")


def overlap_area(bbox, patch):
    """Signed product ``(min(x2,p2)-max(x1,p1)) * (min(y2,q2)-max(y1,q1))``.

    Two disjoint rectangles can give a positive product here (both factors
    negative); use :func:`clamped_overlap` to get the geometric area.
    """
    check_rect(bbox, "bounding box")
    check_rect(patch, "patch rectangle")
    w, h = _factors(bbox, patch)
    return w * h


def _factors(bbox, patch):
    (x1, y1), (x2, y2) = bbox
    (p1, q1), (p2, q2) = patch
    return min(x2, p2) - max(x1, p1), min(y2, q2) - max(y1, q1)


def clamped_overlap(bbox, patch):
    """Intersection area; zero unless both side lengths are strictly positive."""
    check_rect(bbox, "bounding box")
    check_rect(patch, "patch rectangle")
    w, h = _factors(bbox, patch)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def overlap_matrix(boxes, rects):
    """Clamped intersection areas of every box with every rectangle.

    boxes: (m, 4) rows ``x1 y1 x2 y2``; rects: (n, 4) rows ``p1 q1 p2 q2``.
    Returns an (m, n) integer array.
    """
    b = np.asarray(boxes)[:, None, :]
    r = np.asarray(rects)[None, :, :]
    w = np.minimum(b[..., 2], r[..., 2]) - np.maximum(b[..., 0], r[..., 0])
    h = np.minimum(b[..., 3], r[..., 3]) - np.maximum(b[..., 1], r[..., 1])
    # a non-positive side length zeroes the product, matching clamped_overlap
    return np.maximum(w, 0) * np.maximum(h, 0)


def _overlap_fractions(boxes, rects):
    """Max clamped overlap fraction of each patch rectangle over ``boxes``."""
    if len(boxes) == 0:
        return np.zeros(len(rects))
    patch_area = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    return overlap_matrix(boxes, rects).max(axis=0) / patch_area


def label_partitions(slides, patches, policy=None):
    """Assign each patch to A, B or C.

    A patch of a cancerous slide goes to A when its best overlap fraction
    with any annotation box reaches ``policy.threshold``, otherwise to B.
    Every patch of a benign slide goes to C. Output is ordered by patch_id.
    """
    policy = policy or OverlapPolicy()
    by_slide = {s.slide_id: s for s in slides}
    groups = {}
    for p in patches:
        if p.partition is not Partition.UNLABELED:
            raise StateError(f"patch {p.patch_id} is already labeled")
        if p.slide_id not in by_slide:
            raise GeometryError(f"patch {p.patch_id}: unknown slide {p.slide_id!r}")
        groups.setdefault(p.slide_id, []).append(p)

    out = []
    for sid, members in groups.items():
        slide = by_slide[sid]
        rects = np.array([[p.rect[0][0], p.rect[0][1], p.rect[1][0], p.rect[1][1]]
                          for p in members], dtype=np.int64)
        bad = ((rects[:, 0] < 0) | (rects[:, 1] < 0)
               | (rects[:, 2] > slide.width_px) | (rects[:, 3] > slide.height_px)
               | (rects[:, 0] >= rects[:, 2]) | (rects[:, 1] >= rects[:, 3]))
        if bad.any():
            p = members[int(np.argmax(bad))]
            raise GeometryError(
                f"patch {p.patch_id} rectangle {p.rect} is outside slide {sid!r}")
        if slide.image_label == 0:
            out.extend(p.with_partition(Partition.C) for p in members)
            continue
        boxes = np.array([[r.bbox[0][0], r.bbox[0][1], r.bbox[1][0], r.bbox[1][1]]
                          for r in slide.annotations], dtype=np.int64).reshape(-1, 4)
        frac = _overlap_fractions(boxes, rects)
        # a zero threshold still requires some actual overlap
        is_tumor = (frac >= policy.threshold) & (frac > 0)
        out.extend(p.with_partition(Partition.A if t else Partition.B)
                   for p, t in zip(members, is_tumor))
    out.sort(key=lambda p: p.patch_id)
    return out


@dataclass(frozen=True)
class Census:
    counts: dict
    ratios: dict
    total: int
    no_positives: bool

    def to_dict(self):
        return {"counts": dict(self.counts), "ratios_pct": dict(self.ratios),
                "total": self.total, "no_positives": self.no_positives}


def census_from_counts(a, b, c):
    total = a + b + c
    counts = {"A": a, "B": b, "C": c}
    ratios = {k: (round(100.0 * v / total, 1) if total else 0.0)
              for k, v in counts.items()}
    if a == 0:
        logger.warning("partition A is empty: no positive patches")
    return Census(counts, ratios, total, a == 0)


def partition_census(patches):
    """Counts per partition with percentage ratios rounded to 0.1."""
    tally = {Partition.A: 0, Partition.B: 0, Partition.C: 0}
    for p in patches:
        if p.partition is Partition.UNLABELED:
            raise StateError(f"patch {p.patch_id} is unlabeled")
        tally[p.partition] += 1
    return census_from_counts(tally[Partition.A], tally[Partition.B],
                              tally[Partition.C])
