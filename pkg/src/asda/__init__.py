"""Adversarial soft-detection-based aggregation for compact image descriptors."""

from asda.aggregation import (
    ReductionLayer,
    aggregate_map,
    concat_and_reduce,
    describe,
    describe_efficient,
    pool_region,
)
from asda.detector import DetectorStack, compute_semantic_maps, init_detector_stack, residual_mask
from asda.evaluation import average_precision, load_groundtruth, mean_average_precision, rank_database
from asda.features import Backbone, BackboneConfig, build_backbone, extract_feature_map
from asda.model import ASDAModel
from asda.regions import CandidateRegion, crop_soft_region_proposal, generate_candidate_regions

__version__ = "0.1.0"

__all__ = [
    "ASDAModel",
    "Backbone",
    "BackboneConfig",
    "CandidateRegion",
    "DetectorStack",
    "ReductionLayer",
    "aggregate_map",
    "average_precision",
    "build_backbone",
    "compute_semantic_maps",
    "concat_and_reduce",
    "crop_soft_region_proposal",
    "describe",
    "describe_efficient",
    "extract_feature_map",
    "generate_candidate_regions",
    "init_detector_stack",
    "load_groundtruth",
    "mean_average_precision",
    "pool_region",
    "rank_database",
    "residual_mask",
]
