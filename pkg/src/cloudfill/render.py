"""Differentiable point-splat rasterization to silhouette and depth maps,
plus density-aware splat radius estimation (DARE).

Each point covers the pixels whose centers fall strictly inside its
screen-space disc; a pixel blends at most k_blend covering points, nearest
in depth first. Silhouette opacity falls off as (1 - d^2/r^2)^gamma from
the splat center; depth takes the minimum z among blended points.
Coverage membership itself is a hard test, so gradients are exact in the
interior of a splat and absent across its boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .camera import Camera, project, project_diff
from .cloud import PointCloud


class RenderError(Exception):
    pass


@dataclass
class SplatConfig:
    radius: float = 0.03      # normalized device units; pixels = radius * min(W,H) / 2
    k_blend: int = 8
    gamma: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise RenderError(f"splat radius must be positive, got {self.radius}")
        if self.k_blend < 1:
            raise RenderError(f"k_blend must be at least 1, got {self.k_blend}")

    def radius_pixels(self, width: int, height: int) -> float:
        return self.radius * min(width, height) / 2.0


@dataclass
class RasterFragments:
    """Flattened per-pixel blend lists: entry e says point entry_point[e]
    covers pixel entry_pixel[e] (flat row-major index). Entries are grouped
    by pixel and z-ascending within each group."""

    entry_pixel: np.ndarray
    entry_point: np.ndarray
    entry_d2r2: np.ndarray
    covered_pixels: np.ndarray   # unique flat indices, ascending
    entry_seg: np.ndarray        # ordinal of entry's pixel within covered_pixels
    height: int
    width: int

    @property
    def foreground_count(self) -> int:
        return int(self.covered_pixels.size)


def rasterize(positions: np.ndarray, camera: Camera, splat: SplatConfig,
              radius_override: Optional[float] = None) -> RasterFragments:
    """Coverage lists for every pixel, truncated to the k_blend nearest
    covering points in z (ties broken by screen position then point id, so
    the result is independent of input ordering)."""
    positions = np.asarray(positions, dtype=np.float64)
    uv, z = project(positions, camera)
    h, w = camera.height, camera.width
    r_px = (radius_override if radius_override is not None
            else splat.radius) * min(w, h) / 2.0
    if r_px <= 0:
        raise RenderError(f"splat radius must be positive, got {r_px} px")

    u, v = uv[:, 0], uv[:, 1]
    c0 = np.maximum(np.ceil(u - r_px - 0.5).astype(np.int64), 0)
    c1 = np.minimum(np.floor(u + r_px - 0.5).astype(np.int64), w - 1)
    r0 = np.maximum(np.ceil(v - r_px - 0.5).astype(np.int64), 0)
    r1 = np.minimum(np.floor(v + r_px - 0.5).astype(np.int64), h - 1)
    cw = np.maximum(c1 - c0 + 1, 0)
    ch = np.maximum(r1 - r0 + 1, 0)
    counts = cw * ch
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RasterFragments(empty, empty, np.zeros(0), empty, empty, h, w)

    pid = np.repeat(np.arange(positions.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - starts[pid]
    width_per = cw[pid]
    rows = r0[pid] + local // width_per
    cols = c0[pid] + local % width_per

    dx = u[pid] - (cols + 0.5)
    dy = v[pid] - (rows + 0.5)
    d2 = dx * dx + dy * dy
    inside = d2 < r_px * r_px
    pid, rows, cols, d2 = pid[inside], rows[inside], cols[inside], d2[inside]
    if pid.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RasterFragments(empty, empty, np.zeros(0), empty, empty, h, w)

    pix = rows * w + cols
    zz = z[pid]
    order = np.lexsort((pid, v[pid], u[pid], zz, pix))
    pix, pid, zz, d2 = pix[order], pid[order], zz[order], d2[order]

    covered, seg, group_counts = np.unique(pix, return_inverse=True, return_counts=True)
    group_starts = np.concatenate([[0], np.cumsum(group_counts)[:-1]])
    rank = np.arange(pix.size) - group_starts[seg]
    keep = rank < splat.k_blend
    pix, pid, zz, d2, seg = pix[keep], pid[keep], zz[keep], d2[keep], seg[keep]

    return RasterFragments(pix, pid, d2 / (r_px * r_px), covered, seg, h, w)


def _zeros_image(h: int, w: int, dtype) -> ad.Tensor:
    return ad.Tensor(np.zeros((h, w)), dtype=dtype)


def render_silhouette_diff(positions: ad.Tensor, camera: Camera, splat: SplatConfig,
                           radius_override: Optional[float] = None) -> ad.Tensor:
    """Soft silhouette (H, W) in [0, 1], differentiable with respect to the
    point positions through the splat opacities."""
    frag = rasterize(positions.data, camera, splat, radius_override)
    h, w = camera.height, camera.width
    if frag.entry_point.size == 0:
        return _zeros_image(h, w, positions.dtype)
    u, v, _ = project_diff(positions, camera)
    r_px = (radius_override if radius_override is not None
            else splat.radius) * min(w, h) / 2.0

    cols = (frag.entry_pixel % w) + 0.5
    rows = (frag.entry_pixel // w) + 0.5
    su = ad.reshape(ad.gather(u, frag.entry_point), (-1,))
    sv = ad.reshape(ad.gather(v, frag.entry_point), (-1,))
    dx = su - ad.Tensor(cols, dtype=positions.dtype)
    dy = sv - ad.Tensor(rows, dtype=positions.dtype)
    base = 1.0 - (dx * dx + dy * dy) * (1.0 / (r_px * r_px))
    if splat.gamma == 1.0:
        alpha = base
    else:
        alpha = ad.exp(splat.gamma * ad.log(base))
    transparency = ad.segment_prod(1.0 - alpha, frag.entry_seg, frag.foreground_count)
    covered_value = 1.0 - transparency
    flat = ad.scatter_add(covered_value, frag.covered_pixels, h * w)
    return ad.reshape(flat, (h, w))


def render_depth_diff(positions: ad.Tensor, camera: Camera, splat: SplatConfig,
                      radius_override: Optional[float] = None) -> ad.Tensor:
    """Depth map (H, W): minimum camera-space z of the blended points per
    covered pixel, 0 background. Differentiable through the winning z."""
    frag = rasterize(positions.data, camera, splat, radius_override)
    h, w = camera.height, camera.width
    if frag.entry_point.size == 0:
        return _zeros_image(h, w, positions.dtype)
    _, _, z = project_diff(positions, camera)
    sz = ad.reshape(ad.gather(z, frag.entry_point), (-1,))
    mins = ad.segment_min(sz, frag.entry_seg, frag.foreground_count, fill=0.0)
    flat = ad.scatter_add(mins, frag.covered_pixels, h * w)
    return ad.reshape(flat, (h, w))


def render_silhouette(cloud: PointCloud, camera: Camera, splat: SplatConfig,
                      radius_override: Optional[float] = None) -> np.ndarray:
    with ad.no_grad():
        return render_silhouette_diff(ad.Tensor(cloud.positions, dtype=np.float64),
                                      camera, splat, radius_override).data


def render_depth(cloud: PointCloud, camera: Camera, splat: SplatConfig,
                 radius_override: Optional[float] = None) -> np.ndarray:
    with ad.no_grad():
        return render_depth_diff(ad.Tensor(cloud.positions, dtype=np.float64),
                                 camera, splat, radius_override).data


# ---------------------------------------------------------------------------
# density-aware radius estimation


def dare_radius(m_points: int, foreground_pixels: int, eta: float) -> float:
    """Splat radius inversely proportional to projected point density
    d = M/A, evaluated as r = eta * A / M so the scaling law is exact."""
    if foreground_pixels < 1:
        raise RenderError("cannot estimate density from an empty foreground")
    r = eta * foreground_pixels / m_points
    if r <= 0:
        raise RenderError(f"density-aware radius must be positive, got {r} (eta={eta})")
    return r


def estimate_eta(depth_maps, r0: float, m_points: int) -> float:
    """Pick eta so a view of average foreground area reproduces r0."""
    counts = [int(np.count_nonzero(np.asarray(m) > 0)) for m in depth_maps]
    if not counts:
        raise RenderError("cannot estimate eta from an empty map set")
    a_avg = float(np.mean(counts))
    if a_avg <= 0:
        raise RenderError("cannot estimate eta: all maps are empty")
    d_avg = m_points / a_avg
    return r0 * d_avg


def compute_dare_radius(positions: np.ndarray, camera: Camera, splat: SplatConfig,
                        eta: float) -> Tuple[float, int]:
    """First DARE pass: render at the initial radius, count foreground
    pixels, derive the density-adjusted radius. An empty first pass falls
    back to the initial radius."""
    frag = rasterize(np.asarray(positions, dtype=np.float64), camera, splat)
    a = frag.foreground_count
    if a == 0:
        return splat.radius, 0
    return dare_radius(positions.shape[0], a, eta), a


def render_depth_dare_diff(positions: ad.Tensor, camera: Camera, splat: SplatConfig,
                           eta: float) -> ad.Tensor:
    radius, _ = compute_dare_radius(positions.data, camera, splat, eta)
    return render_depth_diff(positions, camera, splat, radius_override=radius)


def render_depth_dare(cloud: PointCloud, camera: Camera, splat: SplatConfig,
                      eta: float) -> np.ndarray:
    with ad.no_grad():
        return render_depth_dare_diff(ad.Tensor(cloud.positions, dtype=np.float64),
                                      camera, splat, eta).data


def render_silhouette_dare_diff(positions: ad.Tensor, camera: Camera, splat: SplatConfig,
                                eta: float) -> ad.Tensor:
    radius, _ = compute_dare_radius(positions.data, camera, splat, eta)
    return render_silhouette_diff(positions, camera, splat, radius_override=radius)


# ---------------------------------------------------------------------------
# post-processing


def binarize(depth: np.ndarray) -> np.ndarray:
    """Foreground indicator: 1 where depth > 0, else 0."""
    return (np.asarray(depth) > 0).astype(np.float64)


def normalize_depth(depth: np.ndarray, camera_distance: float) -> np.ndarray:
    """Scale depth into [0, 1] for discriminator input; background stays 0."""
    return np.asarray(depth, dtype=np.float64) / (camera_distance + 1.0)


def hole_fraction(rendered_mask: np.ndarray, reference_mask: np.ndarray) -> float:
    """Fraction of reference-foreground pixels left uncovered by the render."""
    ref = np.asarray(reference_mask) > 0
    ren = np.asarray(rendered_mask) > 0
    total = int(ref.sum())
    if total == 0:
        return 0.0
    return float(np.sum(ref & ~ren)) / total
