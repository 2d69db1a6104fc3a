"""Coarse-to-fine video corpus moment retrieval on a synthetic benchmark."""

from .augmentation import AugmentationPolicy, AugOp
from .corpus import (
    CorpusError,
    CorpusManifest,
    FrameSpan,
    QueryRecord,
    SubtitleSpan,
    VideoRecord,
    generate_synthetic_corpus,
    load_manifest,
    read_features,
    write_features,
)
from .encoders import ModelConfig
from .pipeline import (
    EvalReport,
    MomentPrediction,
    MomentRetrievalModel,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "AugOp",
    "AugmentationPolicy",
    "CorpusError",
    "CorpusManifest",
    "EvalReport",
    "FrameSpan",
    "ModelConfig",
    "MomentPrediction",
    "MomentRetrievalModel",
    "QueryRecord",
    "SubtitleSpan",
    "TrainConfig",
    "VideoRecord",
    "evaluate",
    "generate_synthetic_corpus",
    "load_checkpoint",
    "load_manifest",
    "read_features",
    "save_checkpoint",
    "train",
    "write_features",
]
