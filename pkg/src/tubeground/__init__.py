"""Weakly supervised spatio-temporal video grounding on precomputed features."""

from .config import ExperimentConfig
from .core import (BoundingBox, ContractError, DetectionBox, GroundingPrediction, GroundingSample, GroundTruth,
                   MetricsReport, QueryEmbedding, Tubelet, VideoRecord)
from .crg import DecomposedQuery, decompose
from .estimators import CoSPaLGrounder, QueryDecomposer, WGDinoBaseline
from .feature_io import DatasetManifest, load_samples, read_features, write_features
from .linker import LinkerConfig, TubeletLinker, link
from .metrics import temporal_iou, upper_bound_analysis, video_iou
from .nn import NumericalError
from .sps import TrainPlan, build_stages, difficulty, evaluate, train
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CoSPaLGrounder", "ContractError", "DatasetManifest", "DecomposedQuery", "DetectionBox",
    "ExperimentConfig", "GroundTruth", "GroundingPrediction", "GroundingSample", "LinkerConfig", "MetricsReport",
    "NumericalError", "QueryDecomposer", "QueryEmbedding", "SyntheticSpec", "TrainPlan", "Tubelet",
    "TubeletLinker", "VideoRecord", "WGDinoBaseline", "build_stages", "decompose", "difficulty", "evaluate",
    "generate_synthetic", "link", "load_samples", "read_features", "temporal_iou", "train",
    "upper_bound_analysis", "video_iou", "write_features",
]
