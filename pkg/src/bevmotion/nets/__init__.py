from .backbone import FeatureMap, available_backbones, create_backbone, extract_features
from .generator import ConvGRUCell, GaussianLatentHead, LatentField, MotionRollout
from .model import MotionPredictionNet
from .pattern_prior import PatternPriorExtractor

__all__ = [
    "FeatureMap",
    "available_backbones",
    "create_backbone",
    "extract_features",
    "ConvGRUCell",
    "GaussianLatentHead",
    "LatentField",
    "MotionRollout",
    "MotionPredictionNet",
    "PatternPriorExtractor",
]
