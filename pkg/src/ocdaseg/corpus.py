"""On-disk corpus format and dataset splits.

Layout under a corpus root:

    manifest.json           split membership + generator config echo
    patches/<id>.png        8-bit RGB image
    patches/<id>_labels.png 16-bit instance label map
    patches/<id>.json       sidecar: patch_id, domain, subdomain_id, seed

Boundary maps are never stored; they are a pure function of the label
map and get recomputed on load.  Target labels are stored for every
split — training code is responsible for not looking at them outside
evaluation.
"""

import dataclasses
import json
import os

import numpy as np
from PIL import Image

from ocdaseg.exceptions import ConfigError
from ocdaseg.synth import (
    Patch,
    SynthConfig,
    boundary_map,
    generate_source_patch,
    generate_target_patch,
)

FORMAT_VERSION = 1
SPLITS = ("source_train", "target_train", "test_seen", "test_unseen")


@dataclasses.dataclass
class CorpusConfig:
    """Sizing of the generated corpus."""

    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    source_train_count: int = 96
    per_style_count: int = 40
    seen_train_fraction: float = 0.8

    def validate(self):
        self.synth.validate()
        if self.source_train_count < 1 or self.per_style_count < 1:
            raise ConfigError("corpus counts must be positive")
        if not 0.0 < self.seen_train_fraction < 1.0:
            raise ConfigError("seen_train_fraction must lie in (0, 1)")
        return self


def _patch_seed(root_seed, tag, index):
    """Stable per-patch integer seed derived from the experiment seed."""
    return int(np.random.SeedSequence([root_seed, tag, index]).generate_state(1)[0])


def save_patch(patches_dir, patch):
    img8 = np.clip(np.round(patch.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(os.path.join(patches_dir, f"{patch.patch_id}.png"))
    if patch.labels.max() > np.iinfo(np.uint16).max:
        raise ConfigError("more instances than a 16-bit label map can hold")
    Image.fromarray(patch.labels.astype(np.uint16)).save(
        os.path.join(patches_dir, f"{patch.patch_id}_labels.png")
    )
    sidecar = {
        "patch_id": patch.patch_id,
        "domain": patch.domain,
        "subdomain_id": int(patch.subdomain_id),
        "seed": int(patch.seed),
    }
    with open(os.path.join(patches_dir, f"{patch.patch_id}.json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def load_patch(patches_dir, patch_id, boundary_width=2):
    with open(os.path.join(patches_dir, f"{patch_id}.json")) as f:
        sidecar = json.load(f)
    img = np.asarray(Image.open(os.path.join(patches_dir, f"{patch_id}.png")), dtype=np.float64)
    img /= 255.0
    labels = np.asarray(Image.open(os.path.join(patches_dir, f"{patch_id}_labels.png")))
    labels = labels.astype(np.int32)
    return Patch(
        image=img,
        labels=labels,
        boundary=boundary_map(labels, boundary_width),
        domain=sidecar["domain"],
        subdomain_id=int(sidecar["subdomain_id"]),
        patch_id=sidecar["patch_id"],
        seed=int(sidecar["seed"]),
    )


class Corpus:
    """Read access to a corpus directory."""

    def __init__(self, root):
        self.root = root
        manifest_path = os.path.join(root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise ConfigError(f"no manifest.json under {root}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError("unsupported corpus format version")
        self.patches_dir = os.path.join(root, "patches")
        self.boundary_width = int(self.manifest["config"]["synth"]["boundary_width"])

    @property
    def patch_size(self):
        return int(self.manifest["config"]["synth"]["patch_size"])

    def ids(self, split):
        if split not in self.manifest["splits"]:
            raise ConfigError(f"unknown split {split!r}")
        return list(self.manifest["splits"][split])

    def load(self, patch_id):
        return load_patch(self.patches_dir, patch_id, self.boundary_width)

    def load_split(self, split):
        return [self.load(pid) for pid in self.ids(split)]


def build_corpus(root, cfg, seed):
    """Generate and write a full corpus; returns the opened Corpus.

    Seen-style patches are split per style into train/test_seen with the
    configured fraction; unseen styles go entirely to test_unseen, so the
    train split never observes them.
    """
    cfg.validate()
    patches_dir = os.path.join(root, "patches")
    os.makedirs(patches_dir, exist_ok=True)
    splits = {name: [] for name in SPLITS}

    for i in range(cfg.source_train_count):
        p = generate_source_patch(_patch_seed(seed, 0, i), cfg.synth, patch_id=f"src_{i:04d}")
        save_patch(patches_dir, p)
        splits["source_train"].append(p.patch_id)

    n_train = int(round(cfg.per_style_count * cfg.seen_train_fraction))
    for style in cfg.synth.seen_styles:
        for i in range(cfg.per_style_count):
            p = generate_target_patch(
                _patch_seed(seed, 1 + style, i), style, cfg.synth,
                patch_id=f"tgt_s{style}_{i:04d}",
            )
            save_patch(patches_dir, p)
            split = "target_train" if i < n_train else "test_seen"
            splits[split].append(p.patch_id)

    for style in cfg.synth.unseen_styles:
        for i in range(cfg.per_style_count):
            p = generate_target_patch(
                _patch_seed(seed, 1 + style, i), style, cfg.synth,
                patch_id=f"tgt_s{style}_{i:04d}",
            )
            save_patch(patches_dir, p)
            splits["test_unseen"].append(p.patch_id)

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "splits": splits,
        "config": dataclasses.asdict(cfg),
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return Corpus(root)
