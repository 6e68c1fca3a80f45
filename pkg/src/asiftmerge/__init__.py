"""Affine-invariant object detection: ASIFT keypoints seed a region-merging segmentation."""

from .asift import AsiftParams, detect_asift, generate_views
from .matcher import ObjectModel, locate_keypoints, match_descriptors, train_model
from .segmerge import MergeParams, Metric, extract_boundary, initial_segment, merge_regions, seed_labels
from .sift import PyramidParams, detect_sift

__all__ = [
    "AsiftParams", "MergeParams", "Metric", "ObjectModel", "PyramidParams",
    "detect_asift", "detect_sift", "extract_boundary", "generate_views", "initial_segment",
    "locate_keypoints", "match_descriptors", "merge_regions", "seed_labels", "train_model",
]
__version__ = "0.1.0"
