"""Stage II: domain-adaptive nuclei instance segmentation."""

from ocdaseg.stage2.infer import predict_instances, segment_split
from ocdaseg.stage2.networks import SegmentationModel
from ocdaseg.stage2.sublabels import image_subdomain_labels
from ocdaseg.stage2.train import Stage2Result, load_stage2_model, train_stage2

__all__ = [
    "SegmentationModel",
    "Stage2Result",
    "train_stage2",
    "load_stage2_model",
    "predict_instances",
    "segment_split",
    "image_subdomain_labels",
]
