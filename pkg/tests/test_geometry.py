import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchbalance.core import Partition
from patchbalance.exceptions import ConfigError, GeometryError, StateError
from patchbalance.geometry import (
    OverlapPolicy,
    census_from_counts,
    clamped_overlap,
    label_partitions,
    overlap_area,
    partition_census,
)


def pixel_overlap(a, b):
    """Oracle: count unit pixels [x, x+1) x [y, y+1) covered by both rectangles."""
    (ax1, ay1), (ax2, ay2) = a
    (bx1, by1), (bx2, by2) = b
    n = 0
    for x in range(min(ax1, bx1), max(ax2, bx2)):
        for y in range(min(ay1, by1), max(ay2, by2)):
            if ax1 <= x < ax2 and ay1 <= y < ay2 and bx1 <= x < bx2 and by1 <= y < by2:
                n += 1
    return n


rects = st.tuples(st.integers(0, 12), st.integers(0, 12),
                  st.integers(1, 6), st.integers(1, 6)).map(
    lambda t: ((t[0], t[1]), (t[0] + t[2], t[1] + t[3])))


class TestOverlap:
    def test_corner_overlap(self):
        assert clamped_overlap(((0, 0), (2, 2)), ((1, 1), (3, 3))) == 1
        assert pixel_overlap(((0, 0), (2, 2)), ((1, 1), (3, 3))) == 1

    def test_identical(self):
        assert clamped_overlap(((0, 0), (4, 4)), ((0, 0), (4, 4))) == 16

    def test_disjoint_signed_product_is_clamped(self):
        bbox, patch = ((0, 0), (1, 1)), ((5, 5), (6, 6))
        assert overlap_area(bbox, patch) == 16  # (-4) * (-4)
        assert clamped_overlap(bbox, patch) == 0

    def test_touching_edges(self):
        assert clamped_overlap(((0, 0), (2, 2)), ((2, 0), (4, 2))) == 0

    @given(rects, rects)
    def test_matches_pixel_count(self, a, b):
        assert clamped_overlap(a, b) == pixel_overlap(a, b)

    @given(rects, rects)
    def test_symmetric(self, a, b):
        assert clamped_overlap(a, b) == clamped_overlap(b, a)

    def test_inverted_rect_rejected(self):
        with pytest.raises(GeometryError):
            clamped_overlap(((2, 2), (1, 1)), ((0, 0), (1, 1)))


class TestLabeling:
    def test_partitions(self, small_manifest):
        out = label_partitions(small_manifest.slides, small_manifest.patches)
        parts = [p.partition for p in out]
        assert parts[0] is Partition.A          # inside the tumor box
        assert parts[1:4] == [Partition.B] * 3  # disjoint from it
        assert parts[4:] == [Partition.C] * 4   # benign slide

    def test_threshold_boundary(self, small_manifest):
        # shift the box so it covers exactly a quarter of patch 0
        from patchbalance.core import AnnotationRegion, SlideRecord
        box = AnnotationRegion(((128, 128), (384, 128), (384, 384), (128, 384)))
        slides = (SlideRecord("s1", 1, 512, 512, (box,)), small_manifest.slides[1])
        at = label_partitions(slides, small_manifest.patches, OverlapPolicy(0.25))
        above = label_partitions(slides, small_manifest.patches, OverlapPolicy(0.26))
        assert all(p.partition is Partition.A for p in at[:4])
        assert all(p.partition is Partition.B for p in above[:4])

    def test_zero_threshold_needs_contact(self, small_manifest):
        from patchbalance.core import AnnotationRegion, SlideRecord
        box = AnnotationRegion(((0, 0), (10, 0), (10, 10)))
        slides = (SlideRecord("s1", 1, 512, 512, (box,)), small_manifest.slides[1])
        out = label_partitions(slides, small_manifest.patches, OverlapPolicy(0.0))
        assert [p.partition for p in out[:4]] == [Partition.A] + [Partition.B] * 3

    def test_relabel_rejected(self, small_manifest):
        out = label_partitions(small_manifest.slides, small_manifest.patches)
        with pytest.raises(StateError):
            label_partitions(small_manifest.slides, out)

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            OverlapPolicy(1.5)


class TestCensus:
    def test_ratios(self):
        c = census_from_counts(2, 3, 5)
        assert c.ratios == {"A": 20.0, "B": 30.0, "C": 50.0}
        assert not c.no_positives

    def test_reference_totals(self):
        c = census_from_counts(38052, 1882202, 2692492)
        assert c.total == 4612746

    def test_no_positives_flag(self, caplog):
        c = census_from_counts(0, 4, 6)
        assert c.no_positives
        assert "no positive" in caplog.text

    def test_from_patches(self, small_manifest):
        out = label_partitions(small_manifest.slides, small_manifest.patches)
        assert partition_census(out).counts == {"A": 1, "B": 3, "C": 4}

    def test_unlabeled_rejected(self, small_manifest):
        with pytest.raises(StateError):
            partition_census(small_manifest.patches)
