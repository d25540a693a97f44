"""Query-guided token compression for multi-view ViT encoders."""

from .config import RunConfig, load_config
from .encoder import EncoderConfig, EncoderWeights, ForwardTrace, forward_backbone, forward_baseline, make_bridge
from .estimator import TokenCompressionEncoder, TokenImportanceScorer
from .mqts import (
    CompressionSchedule,
    ImportanceScore,
    ScorerParams,
    TokenGrid,
    TokenPartition,
    compute_importance,
    gaussian_focal_loss,
    split_tokens,
    train_scorer,
)
from .profiler import count_macs, emit_report, load_report
from .scene import CameraRig, HistoryQuerySet, build_dataset, generate_sequence

__version__ = "0.1.0"

__all__ = [
    "CameraRig",
    "CompressionSchedule",
    "EncoderConfig",
    "EncoderWeights",
    "ForwardTrace",
    "HistoryQuerySet",
    "ImportanceScore",
    "RunConfig",
    "ScorerParams",
    "TokenCompressionEncoder",
    "TokenGrid",
    "TokenImportanceScorer",
    "TokenPartition",
    "build_dataset",
    "compute_importance",
    "count_macs",
    "emit_report",
    "forward_backbone",
    "forward_baseline",
    "gaussian_focal_loss",
    "generate_sequence",
    "load_config",
    "load_report",
    "make_bridge",
    "split_tokens",
    "train_scorer",
]
