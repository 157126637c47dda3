"""Experiment configuration: dataclasses, YAML round-trip, validation.

Defaults are sized for a desk-scale CPU run (small corpus, 2k translation
iterations, K=4 subdomains to match the toy generator).  The
`paper_scale` preset records the full-size settings the method was
designed around (K=10, 1e5 iterations, 1e4-slot memory bank); they are
impractical on one core but kept for completeness.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from ocdaseg.corpus import CorpusConfig
from ocdaseg.exceptions import ConfigError
from ocdaseg.synth import SynthConfig


@dataclass
class Stage1Config:
    """Disentangled translation training."""

    iterations: int = 2000
    batch_size: int = 2  # images per domain per step
    lr: float = 1e-4  # Adam, both generator and discriminator sides
    style_dim: int = 32
    num_subdomains: int = 4  # K
    memory_capacity: int = 10000
    cluster_interval: int = 500  # re-cluster the bank every this many steps
    gamma: float = 0.5  # fuzzy-confidence gate
    fuzziness: float = 2.0  # m in the fuzzy membership
    lambda_drit: float = 1.0
    lambda_cluster: float = 2.0
    lambda_mask: float = 5.0
    lambda_boundary: float = 10.0
    progressive_clustering: bool = True
    shape_supervision: bool = True
    style_randomization: bool = True
    checkpoint_interval: int = 1000
    log_interval: int = 50

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError(
                "stage1 iterations must be >= 0 and batch_size positive"
            )
        if self.num_subdomains < 2:
            raise ConfigError("need at least 2 subdomains to cluster")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.fuzziness <= 1.0:
            raise ConfigError("fuzziness exponent must exceed 1")
        if self.cluster_interval < 1 or self.memory_capacity < self.num_subdomains:
            raise ConfigError("bad clustering schedule")
        if self.style_dim < 1:
            raise ConfigError("style_dim must be positive")
        return self


@dataclass
class Stage2Config:
    """Adaptive instance-segmentation training."""

    iterations: int = 1500
    batch_size: int = 2
    lr: float = 5e-4  # SGD
    momentum: float = 0.9
    lambda_det: float = 1.0
    lambda_adv: float = 1.0
    lambda_roi: float = 2.0
    lambda_style: float = 1.0
    roi_disentangle: bool = True
    glsc: bool = True  # global-local style consistency
    instance_clustering: bool = False  # replace GLSC with gated clustering on ROIs
    rois_per_image: int = 16
    score_threshold: float = 0.5
    nms_threshold: float = 0.5
    max_detections: int = 60
    checkpoint_interval: int = 1000
    log_interval: int = 50

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError(
                "stage2 iterations must be >= 0 and batch_size positive"
            )
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError("score_threshold must lie in (0, 1)")
        if not 0.0 < self.nms_threshold <= 1.0:
            raise ConfigError("nms_threshold must lie in (0, 1]")
        if self.glsc and not self.roi_disentangle:
            raise ConfigError("style consistency requires the ROI disentangler")
        if self.instance_clustering and self.glsc:
            raise ConfigError("instance_clustering replaces glsc; enable only one")
        return self


@dataclass
class ExperimentConfig:
    """Everything one end-to-end run needs."""

    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def validate(self):
        self.corpus.validate()
        self.stage1.validate()
        self.stage2.validate()
        return self

    @classmethod
    def paper_scale(cls):
        """Full-size settings (hours-to-days of compute; not for CPU runs)."""
        cfg = cls()
        cfg.stage1.iterations = 100_000
        cfg.stage1.num_subdomains = 10
        cfg.stage2.iterations = 20_000
        cfg.corpus.source_train_count = 2000
        cfg.corpus.per_style_count = 500
        return cfg


_DATACLASS_FIELDS = {
    "corpus": CorpusConfig,
    "synth": SynthConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
}


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected mapping at {path or 'top level'}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _DATACLASS_FIELDS.get(key)
        if sub is not None and isinstance(value, dict):
            kwargs[key] = _from_dict(sub, value, f"{path}{key}.")
        elif key in ("seen_styles", "unseen_styles", "source_radius", "elong") and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_from_dict(data):
    return _from_dict(ExperimentConfig, data).validate()


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    """Read and validate a YAML experiment config; None/empty -> defaults."""
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
