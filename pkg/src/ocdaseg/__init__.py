"""Open-compound domain adaptive nuclei instance segmentation, desk scale.

Two-stage pipeline: (I) disentangled cross-domain image translation with
progressive subdomain clustering and nucleus shape preservation, (II)
proposal-based instance segmentation with instance-level feature
disentanglement and global-local style consistency.  Everything runs on
procedurally generated microscopy-like data so that the behaviour of each
component can be verified against ground truth.
"""

__version__ = "0.1.0"

from ocdaseg.exceptions import ConfigError, TrainingDiverged

__all__ = ["ConfigError", "TrainingDiverged", "__version__"]
