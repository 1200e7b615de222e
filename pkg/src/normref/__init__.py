"""Oriented normal estimation for point clouds.

PCA normals with MST sign propagation, a learned refinement network trained
with clean-twin supervision, and Chamfer Normal Distance evaluation.
"""
from .errors import DataError, NumericError, ShapeError
from .geom import PointCloud, SpatialIndex, build_spatial_index, knn
from .metrics import EvalReport, cnd, rmse
from .orient_init import OrientedNormalField, init_oriented_normals

__version__ = "0.1.0"

__all__ = [
    "DataError", "NumericError", "ShapeError", "PointCloud", "SpatialIndex", "build_spatial_index", "knn",
    "EvalReport", "cnd", "rmse", "OrientedNormalField", "init_oriented_normals",
]
