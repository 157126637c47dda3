"""End-to-end experiment orchestration with content-addressed caching.

A run is: corpus -> stage I -> translated corpus -> stage II -> metrics.
Every stage's output directory is keyed by a hash of everything that
feeds it, so repeated runs — and ablation variants that share a prefix
of the pipeline — reuse finished artifacts instead of recomputing them
(e.g. disabling a stage-II loss reuses the stage-I checkpoint).

Ablations are named switches applied on top of a base config:

    pcs        no progressive clustering (single k-means at the end,
               no separation loss shaping the style space)
    nssp       no shape supervision during translation
    id         no ROI feature disentanglement (heads read raw ROI
               features; regeneration and style consistency drop out)
    glsc       no instance-style consistency loss
    clust2     replace style consistency with gated instance clustering
    style_rand no style randomization (encoded donor styles only)
    source_only supervised training on raw source patches, no
               adaptation at all (the floor every variant should beat)
"""

import copy
import dataclasses
import json
import os

import numpy as np

from ocdaseg.config import ExperimentConfig
from ocdaseg.corpus import Corpus, build_corpus
from ocdaseg.exceptions import ConfigError
from ocdaseg.metrics import MetricsReport
from ocdaseg.stage1 import (
    load_stage1_model,
    stage1_training_fields,
    synthesize_translated_corpus,
    train_stage1,
)
from ocdaseg.stage2 import load_stage2_model, segment_split, train_stage2
from ocdaseg.torchutil import stable_hash

ABLATIONS = ("none", "pcs", "nssp", "id", "glsc", "clust2", "style_rand", "source_only")
EVAL_SPLITS = ("test_seen", "test_unseen")


def apply_ablation(cfg, ablation):
    """Return a config copy with one named switch applied."""
    if ablation in (None, "none", "full"):
        return copy.deepcopy(cfg)
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; valid: {ABLATIONS}")
    out = copy.deepcopy(cfg)
    if ablation == "pcs":
        out.stage1.progressive_clustering = False
        out.stage1.lambda_cluster = 0.0
    elif ablation == "nssp":
        out.stage1.shape_supervision = False
        out.stage1.lambda_mask = 0.0
        out.stage1.lambda_boundary = 0.0
    elif ablation == "id":
        out.stage2.roi_disentangle = False
        out.stage2.lambda_roi = 0.0
        out.stage2.glsc = False
        out.stage2.lambda_style = 0.0
    elif ablation == "glsc":
        out.stage2.glsc = False
        out.stage2.lambda_style = 0.0
    elif ablation == "clust2":
        out.stage2.glsc = False
        out.stage2.instance_clustering = True
    elif ablation == "style_rand":
        out.stage1.style_randomization = False
    elif ablation == "source_only":
        out.stage2.lambda_adv = 0.0
        out.stage2.lambda_roi = 0.0
        out.stage2.lambda_style = 0.0
        out.stage2.glsc = False
    return out


@dataclasses.dataclass
class ExperimentResult:
    config: ExperimentConfig
    ablation: str
    out_dir: str
    corpus_dir: str
    stage1_dir: str
    translated_dir: str
    stage2_dir: str
    reports: dict  # split -> MetricsReport
    stage1_events: list
    stage2_history: list


def _cache_dir(cache_root, kind, key):
    return os.path.join(cache_root, f"{kind}_{key}")


def ensure_corpus(cfg, seed, cache_root):
    """Build (or reuse) the corpus for this config+seed; returns Corpus."""
    key = stable_hash({"corpus": dataclasses.asdict(cfg.corpus), "seed": seed})
    root = _cache_dir(cache_root, "corpus", key)
    if os.path.exists(os.path.join(root, "manifest.json")):
        return Corpus(root)
    return build_corpus(root, cfg.corpus, seed)


def _load_cached_run(cfg, out_dir, cfg_hash, seed, ablation, splits):
    """Reconstruct a finished ExperimentResult from out_dir, or None."""
    run_path = os.path.join(out_dir, "run.json")
    if not os.path.exists(run_path):
        return None
    with open(run_path) as f:
        summary = json.load(f)
    if summary.get("config_hash") != cfg_hash or summary.get("seed") != seed:
        return None
    if summary.get("ablation") != ablation:
        return None
    dirs = summary.get("dirs", {})
    if any(d and not os.path.isdir(d) for d in dirs.values()):
        return None
    reports = {}
    for split in splits:
        path = os.path.join(out_dir, f"metrics_{split}.json")
        if not os.path.exists(path):
            return None
        report = MetricsReport.load_json(path)
        if report.meta.get("config") != cfg_hash:
            return None
        reports[split] = report
    return ExperimentResult(
        config=cfg, ablation=ablation, out_dir=out_dir,
        corpus_dir=dirs.get("corpus", ""), stage1_dir=dirs.get("stage1", ""),
        translated_dir=dirs.get("translated", ""), stage2_dir=dirs.get("stage2", ""),
        reports=reports, stage1_events=summary.get("stage1_events", []),
        stage2_history=summary.get("stage2_history", []),
    )


def run_experiment(cfg, out_dir, seed=None, ablation="none", cache_root=None,
                   splits=EVAL_SPLITS, resume=True):
    """Run the full pipeline; returns an ExperimentResult.

    cache_root (default: out_dir) holds the shared stage artifacts;
    out_dir receives the metrics and a run summary.
    """
    cfg = apply_ablation(cfg, ablation)
    if seed is not None:
        cfg.seed = int(seed)
    cfg.validate()
    seed = cfg.seed
    ablation = ablation or "none"
    cache_root = cache_root or out_dir
    cfg_hash = stable_hash(dataclasses.asdict(cfg))
    if resume:
        cached = _load_cached_run(cfg, out_dir, cfg_hash, seed, ablation, splits)
        if cached is not None:
            return cached
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(cache_root, exist_ok=True)

    corpus = ensure_corpus(cfg, seed, cache_root)
    corpus_key = stable_hash({"corpus": dataclasses.asdict(cfg.corpus), "seed": seed})

    stage1_dir = translated_dir = ""
    stage1_events = []
    source_only = ablation == "source_only"
    if source_only:
        labeled = corpus.load_split("source_train")
        target = []
        target_labels = {}
    else:
        s1_key = stable_hash({
            "stage1": stage1_training_fields(cfg.stage1), "corpus": corpus_key,
            "seed": seed,
        })
        stage1_dir = _cache_dir(cache_root, "stage1", s1_key)
        s1 = train_stage1(corpus, cfg, stage1_dir, seed=seed, resume=resume)
        stage1_events = s1.events

        model1, extra1 = load_stage1_model(s1.checkpoint_path, cfg.stage1.style_dim)
        tr_key = stable_hash({
            "stage1": s1_key, "randomize": cfg.stage1.style_randomization, "seed": seed,
        })
        translated_dir = _cache_dir(cache_root, "translated", tr_key)
        if os.path.exists(os.path.join(translated_dir, "manifest.json")) and resume:
            translated = Corpus(translated_dir)
        else:
            translated = synthesize_translated_corpus(
                model1, extra1, corpus, translated_dir, seed=seed,
                randomize=cfg.stage1.style_randomization,
            )
        labeled = translated.load_split("train")
        target = corpus.load_split("target_train")
        target_labels = {k: int(v) for k, v in extra1.get("subdomain_labels", {}).items()}

    s2_key = stable_hash({
        "stage2": dataclasses.asdict(cfg.stage2), "seed": seed,
        "labeled": sorted(p.patch_id for p in labeled),
        "stage1": stage1_dir, "k": cfg.stage1.num_subdomains,
    })
    stage2_dir = _cache_dir(cache_root, "stage2", s2_key)
    s2 = train_stage2(
        labeled, target, target_labels, cfg, stage2_dir, seed=seed,
        num_subdomains=cfg.stage1.num_subdomains, synth_cfg=cfg.corpus.synth,
        resume=resume,
    )

    model2, _ = load_stage2_model(s2.checkpoint_path)
    reports = {}
    for split in splits:
        ids, preds, gts = segment_split(model2, corpus, split, cfg)
        report = MetricsReport.from_images(
            ids, preds, gts,
            meta={"split": split, "seed": seed, "ablation": ablation,
                  "config": cfg_hash},
        )
        report.write_json(os.path.join(out_dir, f"metrics_{split}.json"))
        report.write_csv(os.path.join(out_dir, f"metrics_{split}.csv"))
        reports[split] = report

    summary = {
        "ablation": ablation,
        "seed": seed,
        "config_hash": cfg_hash,
        "mean": {split: reports[split].mean for split in reports},
        "stage1_events": stage1_events,
        "stage2_history": s2.history,
        "dirs": {
            "corpus": corpus.root, "stage1": stage1_dir,
            "translated": translated_dir, "stage2": stage2_dir,
        },
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")

    return ExperimentResult(
        config=cfg, ablation=ablation, out_dir=out_dir, corpus_dir=corpus.root,
        stage1_dir=stage1_dir, translated_dir=translated_dir, stage2_dir=stage2_dir,
        reports=reports, stage1_events=stage1_events, stage2_history=s2.history,
    )


def run_ablation_suite(cfg, out_dir, axes=None, seed=None, cache_root=None):
    """Run the base config plus each requested axis; returns a table.

    An axis is either a named switch (see ABLATIONS) or an integer,
    which sweeps the subdomain count K instead of toggling a loss.  The
    table maps variant name -> {split -> mean metrics}; a CSV rendition
    is written next to the per-variant directories.
    """
    axes = list(axes) if axes else [a for a in ABLATIONS if a != "none"]
    cache_root = cache_root or out_dir
    table = {}
    for name in ["none"] + axes:
        if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
            k = int(name)
            name = f"K{k}"
            kcfg = copy.deepcopy(cfg)
            kcfg.stage1.num_subdomains = k
            result = run_experiment(kcfg, os.path.join(out_dir, name),
                                    seed=seed, ablation="none", cache_root=cache_root)
        else:
            sub = os.path.join(out_dir, "full" if name == "none" else f"no_{name}")
            result = run_experiment(cfg, sub, seed=seed, ablation=name, cache_root=cache_root)
        table[name] = {split: r.mean for split, r in result.reports.items()}

    rows = ["variant,split,dice,aji,dq,sq,pq"]
    for name, per_split in table.items():
        for split, mean in per_split.items():
            rows.append(
                f"{name},{split},{mean['dice']:.6f},{mean['aji']:.6f},"
                f"{mean['dq']:.6f},{mean['sq']:.6f},{mean['pq']:.6f}"
            )
    with open(os.path.join(out_dir, "ablation_summary.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    with open(os.path.join(out_dir, "ablation_summary.json"), "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
        f.write("\n")
    return table
