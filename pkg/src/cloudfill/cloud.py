"""Point cloud container, unit-sphere normalization, exact k-NN, PLY I/O.

All nearest-neighbor queries, tree-based or brute-force, order results by
ascending distance with ties broken by ascending point index, so any two
code paths agree exactly.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class CloudError(Exception):
    pass


class PlyError(CloudError):
    pass


@dataclass
class PointCloud:
    """Ordered set of 3-D positions in unit-normalized model space, with
    optional per-point unit normals."""

    positions: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise CloudError(f"positions must be N x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise CloudError("point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise CloudError("positions contain non-finite values")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.positions.shape:
                raise CloudError(f"normals shape {self.normals.shape} != positions shape {self.positions.shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]


def normalize_unit_sphere(cloud: PointCloud) -> Tuple[PointCloud, np.ndarray, float]:
    """Center at the centroid and scale so the farthest point sits on the
    unit sphere. Returns (normalized cloud, center, scale); the original is
    recovered as positions * scale + center."""
    if len(cloud) < 2:
        raise CloudError("normalization needs at least 2 points")
    center = cloud.positions.mean(axis=0)
    shifted = cloud.positions - center
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale < 1e-12:
        raise CloudError("degenerate cloud: all points coincide")
    return PointCloud(shifted / scale, cloud.normals), center, scale


def denormalize(cloud: PointCloud, center: np.ndarray, scale: float) -> PointCloud:
    return PointCloud(cloud.positions * scale + center, cloud.normals)


# ---------------------------------------------------------------------------
# k nearest neighbors


def knn_brute(points: np.ndarray, queries: np.ndarray, k: int,
              exclude_indices: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Exact k-NN by full scan: (Q, k) indices and distances, ascending
    distance with index tie-break.

    `exclude_indices[i]` removes that point from query i's candidates (the
    query's own index when querying a cloud against itself).
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = points.shape[0]
    limit = n - (0 if exclude_indices is None else 1)
    if k > limit:
        raise CloudError(f"k={k} exceeds available neighbors ({limit} of {n} points)")
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    if exclude_indices is not None:
        d2[np.arange(queries.shape[0]), np.asarray(exclude_indices)] = np.inf
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order, dists


def neighbor_indices_fast(points: np.ndarray, k: int, exclude_self: bool = True
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """Self-neighborhoods of a cloud, tuned for hot loops: Gram-matrix
    distances plus a partial selection instead of a full sort. Returned
    distances are recomputed exactly from the coordinates; ordering is
    ascending (distance, index) up to Gram rounding at near-exact ties."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    limit = n - (1 if exclude_self else 0)
    if k > limit:
        raise CloudError(f"k={k} exceeds available neighbors ({limit} of {n} points)")
    sq = np.einsum("ij,ij->i", points, points)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    if k < n:
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
    else:
        cand = np.broadcast_to(np.arange(n), (n, n)).copy()
    cd = np.take_along_axis(d2, cand, axis=1)
    # order by index first, then stable-sort by distance: ties fall to the
    # smaller index
    by_idx = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, by_idx, axis=1)
    cd = np.take_along_axis(cd, by_idx, axis=1)
    by_d = np.argsort(cd, axis=1, kind="stable")
    idx = np.take_along_axis(cand, by_d, axis=1)
    diffs = points[idx] - points[:, None, :]
    dists = np.sqrt(np.einsum("nkd,nkd->nk", diffs, diffs))
    return idx, dists


@dataclass
class _KdNode:
    axis: int = -1
    threshold: float = 0.0
    left: Optional["_KdNode"] = None
    right: Optional["_KdNode"] = None
    indices: Optional[np.ndarray] = None  # leaf only


class KnnIndex:
    """Balanced median-split k-d tree; queries match brute force exactly."""

    LEAF_SIZE = 16

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(points)):
            raise CloudError("cannot index non-finite coordinates")
        self.points = points
        self.root = self._build(np.arange(points.shape[0]))

    def _build(self, idx: np.ndarray) -> _KdNode:
        if idx.size <= self.LEAF_SIZE:
            return _KdNode(indices=idx)
        pts = self.points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spread))
        # sort by (coordinate, index) for a deterministic balanced split
        order = np.lexsort((idx, pts[:, axis]))
        idx = idx[order]
        mid = idx.size // 2
        threshold = float(self.points[idx[mid], axis])
        return _KdNode(axis=axis, threshold=threshold,
                       left=self._build(idx[:mid]), right=self._build(idx[mid:]))

    def query(self, point, k: int, exclude_index: int = -1) -> Tuple[np.ndarray, np.ndarray]:
        """k (index, distance) pairs, ascending distance then index."""
        n = self.points.shape[0]
        limit = n - (1 if exclude_index >= 0 else 0)
        if k > limit:
            raise CloudError(f"k={k} exceeds available neighbors ({limit} of {n} points)")
        point = np.asarray(point, dtype=np.float64)
        heap: list = []  # entries (-d2, -idx): root is the worst kept candidate

        def consider(indices: np.ndarray):
            d2s = ((self.points[indices] - point) ** 2).sum(axis=1)
            for i, d2 in zip(indices, d2s):
                if i == exclude_index:
                    continue
                entry = (-d2, -int(i))
                if len(heap) < k:
                    heapq.heappush(heap, entry)
                elif entry > heap[0]:
                    heapq.heapreplace(heap, entry)

        def visit(node: _KdNode):
            if node.indices is not None:
                consider(node.indices)
                return
            delta = point[node.axis] - node.threshold
            near, far = (node.left, node.right) if delta < 0 else (node.right, node.left)
            visit(near)
            # the far side can still hold equal-distance, smaller-index points
            if len(heap) < k or delta * delta <= -heap[0][0]:
                visit(far)

        visit(self.root)
        ordered = sorted((-d2, -neg_i) for d2, neg_i in heap)
        idx = np.array([i for _, i in ordered], dtype=np.int64)
        dist = np.sqrt(np.array([d2 for d2, _ in ordered]))
        return idx, dist


def build_index(cloud: PointCloud) -> KnnIndex:
    return KnnIndex(cloud.positions)


def knn(index: KnnIndex, query, k: int, exclude_self: bool = False,
        self_index: int = -1) -> Tuple[np.ndarray, np.ndarray]:
    """Query an index for the k nearest points. With exclude_self, pass the
    query's own index in the cloud via self_index."""
    return index.query(query, k, exclude_index=self_index if exclude_self else -1)


# ---------------------------------------------------------------------------
# sampling helpers


def subsample(cloud: PointCloud, n: int, rng: np.random.Generator) -> Tuple[PointCloud, bool]:
    """Uniformly subsample to n points without replacement; falls back to
    with-replacement when the cloud is smaller and reports that via the
    returned flag."""
    total = len(cloud)
    replaced = total < n
    idx = rng.choice(total, size=n, replace=replaced)
    if not replaced:
        idx = np.sort(idx)
    normals = cloud.normals[idx] if cloud.normals is not None else None
    return PointCloud(cloud.positions[idx], normals), replaced


def densify(cloud: PointCloud, factor: int, rng: np.random.Generator, k: int = 4) -> PointCloud:
    """Upsample by interpolating each point toward random near neighbors;
    keeps samples close to the underlying surface."""
    if factor <= 1:
        return cloud
    pts = cloud.positions
    n = len(cloud)
    kk = min(k, n - 1)
    if kk < 1:
        return PointCloud(np.repeat(pts, factor, axis=0))
    nbr_idx, _ = knn_brute(pts, pts, kk, exclude_indices=np.arange(n))
    extra = []
    for _ in range(factor - 1):
        j = nbr_idx[np.arange(n), rng.integers(0, kk, size=n)]
        u = rng.uniform(0.0, 0.5, size=(n, 1))
        extra.append(pts + u * (pts[j] - pts))
    return PointCloud(np.concatenate([pts] + extra, axis=0))


# ---------------------------------------------------------------------------
# PLY I/O (ASCII, vertex x y z [nx ny nz])


def write_ply(path, cloud: PointCloud) -> None:
    # shortest exact decimal per value: read-after-write recovers the
    # stored coordinates bit for bit
    has_normals = cloud.normals is not None
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if has_normals:
            f.write("property float nx\nproperty float ny\nproperty float nz\n")
        f.write("end_header\n")
        for i in range(len(cloud)):
            row = cloud.positions[i]
            if has_normals:
                row = np.concatenate([row, cloud.normals[i]])
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_ply(path) -> PointCloud:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}:1: not a PLY file (missing 'ply' magic)")

    n_vertices = -1
    properties: list = []
    header_end = -1
    current_element = None
    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line.startswith("comment") or not line:
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise PlyError(f"{path}:{ln}: only ASCII PLY is supported")
        elif line.startswith("element"):
            parts = line.split()
            if len(parts) != 3:
                raise PlyError(f"{path}:{ln}: malformed element declaration {line!r}")
            current_element = parts[1]
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyError(f"{path}:{ln}: bad element count {parts[2]!r}")
            if parts[1] == "vertex":
                n_vertices = count
            elif count != 0:
                raise PlyError(f"{path}:{ln}: unsupported non-empty element {parts[1]!r}")
        elif line.startswith("property"):
            if current_element == "vertex":
                properties.append(line.split()[-1])
        elif line == "end_header":
            header_end = ln
            break
        else:
            raise PlyError(f"{path}:{ln}: unrecognized header line {line!r}")
    if header_end < 0:
        raise PlyError(f"{path}: header never terminated with end_header")
    if n_vertices < 1:
        raise PlyError(f"{path}: no vertex element declared")
    if properties[:3] != ["x", "y", "z"]:
        raise PlyError(f"{path}: vertex properties must start with x, y, z (got {properties})")
    has_normals = properties[3:6] == ["nx", "ny", "nz"]
    width = 6 if has_normals else 3

    rows = []
    data_lines = [(ln, s) for ln, s in enumerate(lines[header_end:], start=header_end + 1) if s.strip()]
    if len(data_lines) != n_vertices:
        raise PlyError(f"{path}: header declares {n_vertices} vertices but file has {len(data_lines)} data rows")
    for ln, raw in data_lines:
        parts = raw.split()
        if len(parts) < width:
            raise PlyError(f"{path}:{ln}: expected {width} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[:width]])
        except ValueError:
            raise PlyError(f"{path}:{ln}: non-numeric value in {raw!r}")
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(arr[:, :3], arr[:, 3:6] if has_normals else None)
