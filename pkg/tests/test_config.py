import json

import pytest

from patchbalance.config import RunConfig, apply_overrides, config_from_dict, load_config
from patchbalance.exceptions import ConfigError


def test_defaults_echo():
    cfg = config_from_dict({"synthetic": {}})
    d = cfg.to_dict()
    assert d["clustering"]["k"] == 10
    assert d["sampling"]["mode"] == "jsd"
    assert d["classifier"]["batch_size"] == 512
    assert d["fusion"]["modes"] == ["m0", "m1", "m2", "m3", "m4"]
    assert d["evaluation"]["folds"] == 5


@pytest.mark.parametrize("doc,match", [
    ({"synthetic": {}, "bogus": 1}, "unknown key"),
    ({"synthetic": {"n_slide": 3}}, "unknown key"),
    ({}, "exactly one"),
    ({"synthetic": {}, "manifest": "m.json", "features": "f"}, "exactly one"),
    ({"manifest": "m.json"}, "features"),
    ({"synthetic": {}, "clustering": {"k": "5"}}, "integer"),
    ({"synthetic": {}, "sampling": {"mode": "cosine"}}, "sampling.mode"),
    ({"synthetic": {}, "sampling": {"z_min": 2, "z_max": 1}}, "z_max"),
    ({"synthetic": {}, "fusion": {"modes": ["m7"]}}, "fusion.modes"),
    ({"synthetic": {}, "overlap_threshold": 2.0}, "overlap_threshold"),
    ({"synthetic": {}, "evaluation": {"folds": 1}}, "folds"),
    ({"synthetic": {}, "sampling": {"target": 0}}, "target"),
])
def test_rejections(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"synthetic": {"n_slides": 4}, "seed": 3}))
    cfg = load_config(p)
    assert cfg.synthetic.n_slides == 4 and cfg.seed == 3


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides():
    data = apply_overrides({"synthetic": {}}, ["clustering.k=3", "sampling.mode=euclidean",
                                              "fusion.modes=[\"m2\"]", "seed=9"])
    cfg = config_from_dict(data)
    assert cfg.clustering.k == 3
    assert cfg.sampling.mode == "euclidean"
    assert cfg.fusion.modes == ["m2"]
    assert cfg.seed == 9


def test_override_needs_equals():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["clustering.k"])


def test_int_accepted_for_float():
    cfg = config_from_dict({"synthetic": {"class_separation": 4}})
    assert cfg.synthetic.class_separation == 4.0
    assert isinstance(RunConfig().overlap_threshold, float)
