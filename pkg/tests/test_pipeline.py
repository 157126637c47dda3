"""Pipeline orchestration: ablation switches, caching, report layout."""

import os

import pytest

from ocdaseg.config import ExperimentConfig
from ocdaseg.exceptions import ConfigError
from ocdaseg.pipeline import apply_ablation, run_experiment

from conftest import micro_config


def test_apply_ablation_switches():
    cfg = ExperimentConfig()
    assert apply_ablation(cfg, "none").stage1.progressive_clustering
    a = apply_ablation(cfg, "pcs")
    assert not a.stage1.progressive_clustering and a.stage1.lambda_cluster == 0
    a = apply_ablation(cfg, "nssp")
    assert not a.stage1.shape_supervision
    a = apply_ablation(cfg, "id")
    assert not a.stage2.roi_disentangle and not a.stage2.glsc and a.stage2.lambda_roi == 0
    a = apply_ablation(cfg, "glsc")
    assert not a.stage2.glsc and a.stage2.roi_disentangle
    a = apply_ablation(cfg, "clust2")
    assert a.stage2.instance_clustering and not a.stage2.glsc
    a.validate()  # the combination must be self-consistent
    a = apply_ablation(cfg, "style_rand")
    assert not a.stage1.style_randomization
    a = apply_ablation(cfg, "source_only")
    assert a.stage2.lambda_adv == a.stage2.lambda_roi == a.stage2.lambda_style == 0
    # the base config object is never mutated
    assert cfg.stage1.progressive_clustering and cfg.stage2.glsc
    with pytest.raises(ConfigError):
        apply_ablation(cfg, "bogus")


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = micro_config()
    result = run_experiment(cfg, str(root / "full"), ablation="none",
                            cache_root=str(root / "cache"))
    return result, cfg, root


def test_run_experiment_outputs(micro_run):
    result, cfg, root = micro_run
    for split in ("test_seen", "test_unseen"):
        assert split in result.reports
        assert os.path.exists(os.path.join(result.out_dir, f"metrics_{split}.json"))
        assert os.path.exists(os.path.join(result.out_dir, f"metrics_{split}.csv"))
        mean = result.reports[split].mean
        assert set(mean) == {"dice", "aji", "dq", "sq", "pq"}
        assert all(0.0 <= v <= 1.0 for v in mean.values())
    assert os.path.exists(os.path.join(result.out_dir, "run.json"))
    assert result.stage1_events  # clustering happened


def test_cache_shares_stage1_across_stage2_ablations(micro_run):
    result, cfg, root = micro_run
    # glsc only changes stage II: corpus, stage1 and translated dirs match
    second = run_experiment(cfg, str(root / "no_glsc"), ablation="glsc",
                            cache_root=str(root / "cache"))
    assert second.corpus_dir == result.corpus_dir
    assert second.stage1_dir == result.stage1_dir
    assert second.translated_dir == result.translated_dir
    assert second.stage2_dir != result.stage2_dir


def test_cached_rerun_is_byte_identical(micro_run):
    result, cfg, root = micro_run
    again = run_experiment(cfg, str(root / "again"), ablation="none",
                           cache_root=str(root / "cache"))
    for split in ("test_seen", "test_unseen"):
        a = open(os.path.join(result.out_dir, f"metrics_{split}.json"), "rb").read()
        b = open(os.path.join(again.out_dir, f"metrics_{split}.json"), "rb").read()
        assert a == b


def test_finished_out_dir_is_not_recomputed(micro_run):
    result, cfg, root = micro_run
    path = os.path.join(result.out_dir, "metrics_test_seen.json")
    before = os.path.getmtime(path)
    again = run_experiment(cfg, result.out_dir, ablation="none",
                           cache_root=str(root / "cache"))
    assert os.path.getmtime(path) == before  # loaded, not rewritten
    assert again.reports["test_seen"].per_image == result.reports["test_seen"].per_image
    assert again.stage1_events == result.stage1_events
    assert again.stage2_dir == result.stage2_dir


def test_source_only_skips_stage1(tmp_path):
    cfg = micro_config()
    result = run_experiment(cfg, str(tmp_path / "src_only"), ablation="source_only",
                            cache_root=str(tmp_path / "cache"))
    assert result.stage1_dir == ""
    assert result.translated_dir == ""
    assert "test_unseen" in result.reports
