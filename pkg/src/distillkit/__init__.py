"""Feature and patch-embedding distillation for hierarchical segmentation transformers."""

from .engine import DistillConfig, distill_step, train
from .errors import ConfigError, DataError, DimensionError, DistillError, NumericError
from .fusion import AttentionFusion, FusionStack, SelectiveKernelFusion, review_pipeline
from .losses import LossWeights, PeaParams, PyramidSpec, hcl_loss, pea_loss, total_loss
from .models import EncoderConfig, HierarchicalSegmenter, build_encoder

__version__ = "0.1.0"

__all__ = [
    "AttentionFusion",
    "ConfigError",
    "DataError",
    "DimensionError",
    "DistillConfig",
    "DistillError",
    "EncoderConfig",
    "FusionStack",
    "HierarchicalSegmenter",
    "LossWeights",
    "NumericError",
    "PeaParams",
    "PyramidSpec",
    "SelectiveKernelFusion",
    "build_encoder",
    "distill_step",
    "hcl_loss",
    "pea_loss",
    "review_pipeline",
    "total_loss",
    "train",
]
