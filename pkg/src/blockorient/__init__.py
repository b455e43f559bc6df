"""Normal orientation for open, scene-scale point clouds by block-wise orientation and global flip optimisation."""

from .geometry import PointCloud, build_knn_graph, pca_normals
from .metrics import OrientationReport, chamfer, incorrect_ratio
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "PointCloud",
    "build_knn_graph",
    "pca_normals",
    "OrientationReport",
    "chamfer",
    "incorrect_ratio",
    "PipelineConfig",
    "run_pipeline",
]

__version__ = "0.1.0"
