import json

import numpy as np
import pytest

from patchbalance.core import (
    Partition,
    SlideRecord,
    bbox_of_polygon,
    load_manifest,
    manifest_from_dict,
    manifest_to_dict,
    rng_stream,
    save_manifest,
)
from patchbalance.exceptions import (
    DataError,
    DegeneratePolygonError,
    GeometryError,
    ManifestParseError,
    ReferentialIntegrityError,
)


class TestBoundingBox:
    def test_triangle(self):
        assert bbox_of_polygon([(0, 0), (4, 0), (2, 3)]) == ((0, 0), (4, 3))

    def test_square(self):
        assert bbox_of_polygon([(5, 5), (5, 9), (9, 9), (9, 5)]) == ((5, 5), (9, 9))

    def test_two_vertices_rejected(self):
        with pytest.raises(DegeneratePolygonError):
            bbox_of_polygon([(1, 1), (2, 2)])


class TestManifest:
    def test_round_trip(self, small_manifest, tmp_path):
        path = tmp_path / "m.json"
        save_manifest(small_manifest, path)
        loaded = load_manifest(path)
        assert len(loaded.slides) == 2
        assert len(loaded.patches) == 8
        assert all(p.partition is Partition.UNLABELED for p in loaded.patches)
        assert manifest_to_dict(loaded) == manifest_to_dict(small_manifest)

    def test_unknown_slide(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        doc["patches"][0]["slide_id"] = "s9"
        with pytest.raises(ReferentialIntegrityError):
            manifest_from_dict(doc)

    def test_empty_patch_list(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        doc["patches"] = []
        assert manifest_from_dict(doc).patches == ()

    def test_patch_outside_slide(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        doc["patches"][0]["p1"] = 300
        with pytest.raises(GeometryError):
            manifest_from_dict(doc)

    def test_missing_field_names_record(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        del doc["patches"][3]["q1"]
        with pytest.raises(ManifestParseError, match=r"patches\[3\]"):
            manifest_from_dict(doc)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ManifestParseError):
            load_manifest(path)

    def test_benign_slide_with_annotation_rejected(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        doc["slides"][1]["annotations"] = [[[0, 0], [1, 0], [1, 1]]]
        with pytest.raises(DataError):
            manifest_from_dict(doc)

    def test_patches_sorted_by_id(self, small_manifest):
        doc = manifest_to_dict(small_manifest)
        doc["patches"].reverse()
        ids = [p.patch_id for p in manifest_from_dict(doc).patches]
        assert ids == sorted(ids)

    def test_file_is_compact_json(self, small_manifest, tmp_path):
        path = tmp_path / "m.json"
        save_manifest(small_manifest, path)
        assert json.loads(path.read_text())["format"] == "patchbalance-manifest"


def test_partition_labels():
    assert Partition.A.patch_label == 1
    assert Partition.B.patch_label == 0
    assert Partition.C.patch_label == 0


def test_slide_label_must_be_binary():
    with pytest.raises(DataError):
        SlideRecord("s", 2, 10, 10, ())


class TestRandomStreams:
    def test_same_key_same_draws(self):
        a = rng_stream(7, "sampling", 3).random(5)
        b = rng_stream(7, "sampling", 3).random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        a = rng_stream(7, "sampling", 3).random(5)
        assert not np.array_equal(a, rng_stream(7, "sampling", 4).random(5))
        assert not np.array_equal(a, rng_stream(7, "clustering", 3).random(5))
        assert not np.array_equal(a, rng_stream(8, "sampling", 3).random(5))

    def test_unknown_module(self):
        with pytest.raises(KeyError):
            rng_stream(0, "nope")
