"""Relevance flow through point cloud classifiers.

Layer-wise relevance is propagated from a classifier's decision back through
sampling, grouping, shared convolutions and max pooling to the input points,
then used for saliency maps, consistency metrics, unsupervised part
segmentation and a salient-region attack.
"""

from .attack import AttackConfig, SalientRegionAttack, craft_sample, sweep
from .datagen import make_dataset
from .evalmetrics import class_cp, estimate_normals, part_iou, plane_consistency
from .exceptions import (
    CorruptFileError,
    DegenerateDenominatorError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    ParseError,
    RelevanceFlowError,
    SchemaError,
    VersionMismatchError,
)
from .models import PointNetClassifier
from .partseg import UnsupervisedPartSegmenter, miou, segment
from .relflow import RelevanceFlow, relevance_flow
from .saliency import tier

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CorruptFileError", "DegenerateDenominatorError", "DimensionError",
    "DivergenceError", "NonFiniteError", "ParseError", "PointNetClassifier", "RelevanceFlow",
    "RelevanceFlowError", "SalientRegionAttack", "SchemaError", "UnsupervisedPartSegmenter",
    "VersionMismatchError", "class_cp", "craft_sample", "estimate_normals", "make_dataset",
    "miou", "part_iou", "plane_consistency", "relevance_flow", "segment", "sweep", "tier",
]
