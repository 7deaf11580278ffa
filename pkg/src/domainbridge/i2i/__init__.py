from domainbridge.i2i.translator import (
    IdentityTranslator,
    Translator,
    TranslatorSpec,
    apply_translator,
    load_translator,
    sample_style,
    save_translator,
    translate,
)
from domainbridge.i2i.train import I2iTrainConfig, LossWeights, TrainingDiverged, build_translator, train_i2i

__all__ = [
    "I2iTrainConfig",
    "IdentityTranslator",
    "LossWeights",
    "TrainingDiverged",
    "Translator",
    "TranslatorSpec",
    "apply_translator",
    "build_translator",
    "load_translator",
    "sample_style",
    "save_translator",
    "train_i2i",
    "translate",
]
