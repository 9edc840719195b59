"""Deep contextualized acoustic representations on a from-scratch numpy autodiff core."""

from .corpus import CorpusManifest, generate_synthetic
from .ctc import CtcHead, CtcHeadConfig, LabelVocabulary
from .features import compute_logmel, normalize_pool
from .model import DecoarConfig, DecoarModel
from .pipeline import RunConfig
from .tensor import Tensor
from .trainer import NoamSchedule, TrainOptions, train_finetune, train_pretrain

__all__ = [
    "CorpusManifest",
    "CtcHead",
    "CtcHeadConfig",
    "DecoarConfig",
    "DecoarModel",
    "LabelVocabulary",
    "NoamSchedule",
    "RunConfig",
    "Tensor",
    "TrainOptions",
    "compute_logmel",
    "generate_synthetic",
    "normalize_pool",
    "train_finetune",
    "train_pretrain",
]
