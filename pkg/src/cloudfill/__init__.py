"""Unsupervised single-view point cloud completion: pattern-retrieval
refinement with multi-view adversarial depth supervision."""

from .cloud import PointCloud, build_index, knn, knn_brute, normalize_unit_sphere, read_ply, write_ply
from .config import RunConfig, make_config
from .losses import LossWeights, MetricReport, evaluate, ucd
from .retrieval import Completer, PrnConfig

__version__ = "0.1.0"

__all__ = [
    "Completer",
    "LossWeights",
    "MetricReport",
    "PointCloud",
    "PrnConfig",
    "RunConfig",
    "build_index",
    "evaluate",
    "knn",
    "knn_brute",
    "make_config",
    "normalize_unit_sphere",
    "read_ply",
    "ucd",
    "write_ply",
    "__version__",
]
