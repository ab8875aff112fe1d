"""Experiment config round-trips, overrides, and hashing."""

import json

import pytest

from edgepatch.config import ExperimentConfig
from edgepatch.errors import ConfigError


def test_round_trip_preserves_hash(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    again = ExperimentConfig.from_json_file(str(path))
    assert again.config_hash() == cfg.config_hash()
    assert again.to_dict() == cfg.to_dict()


def test_tuples_survive_json(tmp_path):
    cfg = ExperimentConfig()
    doc = json.loads(cfg.to_json())
    assert isinstance(doc["dataset"]["image_size"], list)
    again = ExperimentConfig.from_dict(doc)
    assert again.dataset.image_size == tuple(cfg.dataset.image_size)
    assert again.generator.placement == tuple(cfg.generator.placement)
    assert again.evaluation.r_values == tuple(cfg.evaluation.r_values)


def test_overrides_parse_json_values():
    cfg = ExperimentConfig()
    cfg.apply_overrides(["victim.epochs=7", "generator.tv_weight=0.25",
                         "dataset.image_size=[64,32]", "evaluation.direction=both"])
    assert cfg.victim.epochs == 7
    assert cfg.generator.tv_weight == 0.25
    assert cfg.dataset.image_size == (64, 32)
    assert cfg.evaluation.direction == "both"


def test_override_changes_hash():
    a = ExperimentConfig()
    b = ExperimentConfig()
    b.apply_overrides(["extractor.seed=999"])
    assert a.config_hash() != b.config_hash()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig().apply_overrides(["nope.epochs=1"])
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig().apply_overrides(["victim.nonexistent=1"])
    with pytest.raises(ConfigError, match="unknown config sections"):
        ExperimentConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"victim": {"bogus": 1}})


def test_malformed_set_flag():
    with pytest.raises(ConfigError, match="--set needs"):
        ExperimentConfig().apply_overrides(["victim.epochs"])
