from .estimator import SelfDeepMatcher
from .network import ASPPDecoder, BackboneConfig, SelfDeepMatchingNet, TinyExtractor, VGGExtractor
from .ops import (
    CorrelationBlock,
    SpatialAttention,
    atrous_conv2d,
    l2_normalize_descriptors,
    self_correlation,
    skip_match_concat,
    top_t_pool,
    zero_out_normalize,
)
from .training import spatial_cross_entropy, to_tensor, train_backbone

__all__ = [
    "ASPPDecoder",
    "BackboneConfig",
    "CorrelationBlock",
    "SelfDeepMatcher",
    "SelfDeepMatchingNet",
    "SpatialAttention",
    "TinyExtractor",
    "VGGExtractor",
    "atrous_conv2d",
    "l2_normalize_descriptors",
    "self_correlation",
    "skip_match_concat",
    "spatial_cross_entropy",
    "to_tensor",
    "top_t_pool",
    "train_backbone",
    "zero_out_normalize",
]
