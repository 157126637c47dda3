"""Config validation and YAML round-trip tests."""

import pytest

from ocdaseg.config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from ocdaseg.exceptions import ConfigError


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    cfg.validate()
    # desk-scale defaults documented in the dataclasses
    assert cfg.stage1.iterations == 2000
    assert cfg.stage1.num_subdomains == 4
    assert cfg.stage1.gamma == 0.5
    assert cfg.stage1.lambda_drit == 1.0
    assert cfg.stage1.lambda_cluster == 2.0
    assert cfg.stage1.lambda_mask == 5.0
    assert cfg.stage1.lambda_boundary == 10.0
    assert cfg.stage2.lambda_det == 1.0
    assert cfg.stage2.lambda_adv == 1.0
    assert cfg.stage2.lambda_roi == 2.0
    assert cfg.stage2.lambda_style == 1.0
    assert cfg.stage1.lr == 1e-4
    assert cfg.stage2.lr == 5e-4
    assert cfg.stage1.memory_capacity == 10000
    assert cfg.stage1.cluster_interval == 500


def test_paper_scale_preset():
    cfg = ExperimentConfig.paper_scale()
    cfg.validate()
    assert cfg.stage1.iterations == 100_000
    assert cfg.stage1.num_subdomains == 10


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=9)
    cfg.stage1.iterations = 123
    cfg.corpus.synth.seen_styles = (0, 2)
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    back = load_config(path)
    assert config_to_dict(back) == config_to_dict(cfg)


def test_empty_yaml_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert config_to_dict(cfg) == config_to_dict(ExperimentConfig())


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="typo_key"):
        config_from_dict({"typo_key": 1})
    with pytest.raises(ConfigError, match="nope"):
        config_from_dict({"stage1": {"nope": 2}})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"stage1": {"gamma": 0.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage1": {"iterations": -1}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage1": {"fuzziness": 1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"score_threshold": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"glsc": True, "roi_disentangle": False}})
    with pytest.raises(ConfigError):
        config_from_dict({"stage2": {"instance_clustering": True}})  # glsc still on
    with pytest.raises(ConfigError):
        config_from_dict({"corpus": {"seen_train_fraction": 1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"corpus": {"synth": {"patch_size": 16}}})


def test_style_lists_coerce_to_tuples():
    cfg = config_from_dict({"corpus": {"synth": {"seen_styles": [0, 1], "unseen_styles": [5]}}})
    assert cfg.corpus.synth.seen_styles == (0, 1)
    assert cfg.corpus.synth.unseen_styles == (5,)
