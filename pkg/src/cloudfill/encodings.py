"""Per-point position and curvature pattern encodings.

Position encoding: mean distance from each point to its K nearest
neighbors (the point itself is never its own neighbor). Curvature
encoding: population standard deviation of the normal-variation values
v(i,j) = 1 - cos(n_i, n_j) over the K neighbors, with normals estimated
from the smallest-eigenvalue eigenvector of the local neighbor covariance.

These features feed the retrieval stage as plain arrays; gradients never
flow through neighbor search or the eigendecomposition.
"""

from __future__ import annotations

from typing import Tuple, Union

import numpy as np

from .cloud import CloudError, PointCloud, neighbor_indices_fast

DEFAULT_K_POSITION = 16
DEFAULT_K_CURVATURE = 24
DEFAULT_EPS = 1e-8


def _neighbor_indices(positions: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    return neighbor_indices_fast(positions, k, exclude_self=True)


def position_encoding(cloud: PointCloud, k: int = DEFAULT_K_POSITION) -> np.ndarray:
    """Mean Euclidean distance to the k nearest neighbors, per point (N,)."""
    _, dists = _neighbor_indices(cloud.positions, k)
    return dists.mean(axis=1)


def local_covariance(cloud: PointCloud, k: int) -> np.ndarray:
    """Covariance of each point's k-neighborhood about the neighbor
    centroid, (N, 3, 3) symmetric PSD."""
    if k < 3:
        raise CloudError(f"covariance needs k >= 3 neighbors, got {k}")
    idx, _ = _neighbor_indices(cloud.positions, k)
    nbrs = cloud.positions[idx]                     # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / k


def eigen_sym3(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
    symmetric 3x3 matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise CloudError(f"expected a 3x3 matrix, got {matrix.shape}")
    if np.max(np.abs(matrix - matrix.T)) > 1e-8:
        raise CloudError("matrix is not symmetric within 1e-8")
    return np.linalg.eigh(matrix)


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_K_CURVATURE,
                     orientation: Union[str, np.ndarray] = "centroid") -> np.ndarray:
    """Unit normals from the smallest-eigenvalue eigenvector of each local
    covariance, with deterministic sign disambiguation.

    orientation="centroid" points normals away from the cloud centroid;
    a 3-vector points them toward that position (a camera eye). Points
    whose reference direction is degenerate orient toward +z.
    """
    cov = local_covariance(cloud, k)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    if isinstance(orientation, str):
        if orientation != "centroid":
            raise CloudError(f"unknown orientation rule {orientation!r}")
        reference = cloud.positions - cloud.positions.mean(axis=0)
    else:
        reference = np.asarray(orientation, dtype=np.float64) - cloud.positions

    dots = np.einsum("ni,ni->n", normals, reference)
    sign = np.where(dots > 1e-12, 1.0, np.where(dots < -1e-12, -1.0, 0.0))
    # degenerate reference: orient toward +z, then +y, then +x
    for axis in (2, 1, 0):
        undecided = sign == 0.0
        if not np.any(undecided):
            break
        comp = normals[undecided, axis]
        sign[undecided] = np.where(comp > 1e-12, 1.0, np.where(comp < -1e-12, -1.0, 0.0))
    sign[sign == 0.0] = 1.0
    normals = normals * sign[:, None]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def curvature_encoding(cloud: PointCloud, normals: np.ndarray,
                       k: int = DEFAULT_K_CURVATURE, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Population standard deviation of v(i,j) = 1 - cos(n_i, n_j) over
    each point's k neighbors, per point (N,). Values lie in [0, 1]."""
    if normals is None:
        raise CloudError("curvature encoding requires normals")
    if eps <= 0:
        raise CloudError("eps must be positive")
    normals = np.asarray(normals, dtype=np.float64)
    idx, _ = _neighbor_indices(cloud.positions, k)
    nj = normals[idx]                               # (N, k, 3)
    dots = np.einsum("nj,nkj->nk", normals, nj)
    norms = np.linalg.norm(normals, axis=1)
    denom = np.maximum(norms[:, None] * norms[idx], eps)
    v = 1.0 - dots / denom
    return v.std(axis=1)  # population form (divide by k)
