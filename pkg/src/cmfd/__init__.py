"""Two-stage copy-move forgery detection: a self-correlation segmentation
backbone followed by proposal-level keypoint matching, score fusion and CRF
refinement."""
from .backbone import BackboneConfig, SelfDeepMatcher
from .base import NotFittedError, PluginUnavailable, SampleSkipped
from .crf import CrfParams
from .fusion import FusionParams
from .metrics import AggregateReport, PixelMetrics, aggregate, image_level_metrics, pixel_metrics
from .pipeline import ProposalSuperGlue, TwoStageDetector
from .proposals import Box, SelectionParams, select_proposals

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "BackboneConfig",
    "Box",
    "CrfParams",
    "FusionParams",
    "NotFittedError",
    "PixelMetrics",
    "PluginUnavailable",
    "ProposalSuperGlue",
    "SampleSkipped",
    "SelectionParams",
    "SelfDeepMatcher",
    "TwoStageDetector",
    "aggregate",
    "image_level_metrics",
    "pixel_metrics",
    "select_proposals",
]
