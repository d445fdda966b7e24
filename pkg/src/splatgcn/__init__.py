"""Splatted-skeleton action recognition: rendering, topology, and training."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    MatrixError,
    ParseError,
    SplatGCNError,
)
from .render import (
    GaussianPrimitive2D,
    HeatmapStack,
    RenderConfig,
    build_covariance,
    evaluate_gaussian,
    render_frame,
    render_sequence,
)
from .skeleton import (
    KinematicSequence,
    NormalizationParams,
    SkeletonSequence,
    compute_velocity,
    load_sequence,
    normalize_sequence,
    save_sequence,
)
from .topology import PriorAdjacency, bhattacharyya_distance, build_prior_adjacency

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "MatrixError",
    "ParseError",
    "SplatGCNError",
    "GaussianPrimitive2D",
    "HeatmapStack",
    "RenderConfig",
    "build_covariance",
    "evaluate_gaussian",
    "render_frame",
    "render_sequence",
    "KinematicSequence",
    "NormalizationParams",
    "SkeletonSequence",
    "compute_velocity",
    "load_sequence",
    "normalize_sequence",
    "save_sequence",
    "PriorAdjacency",
    "bhattacharyya_distance",
    "build_prior_adjacency",
]
