"""Stage I: style-disentangled source->target translation."""

from ocdaseg.stage1.networks import TranslationModel
from ocdaseg.stage1.synthesize import synthesize_translated_corpus, translate_image
from ocdaseg.stage1.train import (
    Stage1Result,
    load_stage1_model,
    stage1_training_fields,
    train_stage1,
)

__all__ = [
    "TranslationModel",
    "Stage1Result",
    "train_stage1",
    "stage1_training_fields",
    "load_stage1_model",
    "synthesize_translated_corpus",
    "translate_image",
]
