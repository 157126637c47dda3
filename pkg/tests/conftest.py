"""Shared fixtures: a tiny corpus, micro training runs, and the shared
desk-scale artifact cache.

The micro fixtures are sized for mechanics checks (do the loops run, do
shapes and bookkeeping hold), not for training quality — quality is
exercised by the acceptance and reference-run suites on the default
desk-scale schedule, whose trained artifacts are shared through
`train_cache`/`toy_experiment` so each (variant, seed) trains at most
once per cache directory.  Set OCDASEG_TEST_CACHE to persist that cache
across pytest invocations.
"""

import os

import pytest

from ocdaseg.config import ExperimentConfig
from ocdaseg.corpus import build_corpus
from ocdaseg.synth import SynthConfig

TRAIN_CACHE_ENV = "OCDASEG_TEST_CACHE"

_EXPERIMENTS = {}


@pytest.fixture(scope="session")
def train_cache(tmp_path_factory):
    env = os.environ.get(TRAIN_CACHE_ENV)
    if env:
        os.makedirs(env, exist_ok=True)
        return env
    return str(tmp_path_factory.mktemp("train_cache"))


def toy_experiment(cache_root, ablation="none", seed=0, k=None):
    """Train (or reuse) one desk-scale pipeline variant; memoized."""
    from ocdaseg.pipeline import run_experiment

    key = (cache_root, ablation, seed, k)
    if key not in _EXPERIMENTS:
        cfg = ExperimentConfig()
        name = f"{ablation}_s{seed}"
        if k is not None:
            cfg.stage1.num_subdomains = k
            name += f"_k{k}"
        print(f"[train] {name} ...", flush=True)
        _EXPERIMENTS[key] = run_experiment(
            cfg, os.path.join(cache_root, "eval", name),
            seed=seed, ablation=ablation, cache_root=cache_root,
        )
    return _EXPERIMENTS[key]


def micro_config():
    cfg = ExperimentConfig(seed=5)
    cfg.corpus.synth = SynthConfig(seen_styles=(0, 1), unseen_styles=(4,))
    cfg.corpus.source_train_count = 6
    cfg.corpus.per_style_count = 6
    cfg.stage1.iterations = 40
    cfg.stage1.cluster_interval = 20
    cfg.stage1.num_subdomains = 2
    cfg.stage1.log_interval = 10
    cfg.stage2.iterations = 30
    cfg.stage2.log_interval = 10
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = micro_config()
    return build_corpus(str(root), cfg.corpus, seed=cfg.seed), cfg


@pytest.fixture(scope="session")
def micro_stage1(tiny_corpus, tmp_path_factory):
    from ocdaseg.stage1 import train_stage1

    corpus, cfg = tiny_corpus
    out = tmp_path_factory.mktemp("stage1")
    result = train_stage1(corpus, cfg, str(out), seed=cfg.seed)
    return result, corpus, cfg


@pytest.fixture(scope="session")
def micro_stage2(micro_stage1, tmp_path_factory):
    from ocdaseg.stage2 import train_stage2

    s1, corpus, cfg = micro_stage1
    out = tmp_path_factory.mktemp("stage2")
    labeled = corpus.load_split("source_train")
    target = corpus.load_split("target_train")
    result = train_stage2(
        labeled, target, s1.subdomain_labels, cfg, str(out), seed=cfg.seed,
        num_subdomains=cfg.stage1.num_subdomains, synth_cfg=cfg.corpus.synth,
    )
    return result, corpus, cfg
