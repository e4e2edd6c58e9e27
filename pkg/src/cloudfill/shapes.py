"""Parametric desk-scale shape categories with repeated substructures.

Three categories: a table (slab on four identical cylindrical legs), a
lamp (base, pole, conical shade), and a watercraft-like hull (half
ellipsoid, deck, cabin box). Ground-truth clouds are sampled uniformly by
area over the part surfaces and normalized to the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .cloud import PointCloud, normalize_unit_sphere

CATEGORIES = ("table", "lamp", "watercraft")

SHAPE_RANGES: Dict[str, Dict[str, Tuple[float, float]]] = {
    "table": {
        "slab_width": (0.8, 1.2),
        "slab_depth": (0.6, 1.0),
        "slab_thickness": (0.04, 0.08),
        "leg_radius": (0.03, 0.05),
        "leg_height": (0.5, 0.8),
    },
    "lamp": {
        "base_radius": (0.15, 0.25),
        "base_height": (0.03, 0.06),
        "pole_radius": (0.015, 0.03),
        "pole_height": (0.7, 1.0),
        "shade_radius_top": (0.10, 0.16),
        "shade_radius_bottom": (0.25, 0.40),
        "shade_height": (0.25, 0.40),
    },
    "watercraft": {
        "hull_half_length": (0.8, 1.2),
        "hull_depth": (0.25, 0.40),
        "hull_half_width": (0.20, 0.35),
        "cabin_half_length": (0.15, 0.25),
        "cabin_height": (0.12, 0.20),
    },
}


class ShapeError(Exception):
    pass


@dataclass
class ShapeSpec:
    category: str
    seed: int
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in SHAPE_RANGES:
            raise ShapeError(f"unknown category {self.category!r}; expected one of {CATEGORIES}")
        merged = dict(SHAPE_RANGES[self.category])
        merged.update(self.ranges)
        self.ranges = merged

    def draw_params(self, rng: np.random.Generator) -> Dict[str, float]:
        params = {}
        for key in sorted(self.ranges):
            lo, hi = self.ranges[key]
            if lo > hi:
                raise ShapeError(f"{self.category}.{key}: bad range ({lo}, {hi})")
            params[key] = float(rng.uniform(lo, hi))
        return params


@dataclass
class SurfacePart:
    label: str
    area: float
    sample: Callable[[np.random.Generator, int], np.ndarray]


# -- primitive surface samplers ---------------------------------------------


def _box_part(label: str, center, half_extents) -> SurfacePart:
    center = np.asarray(center, dtype=np.float64)
    ex, ey, ez = half_extents
    face_areas = np.array([4 * ey * ez, 4 * ey * ez, 4 * ex * ez, 4 * ex * ez, 4 * ex * ey, 4 * ex * ey])

    def sample(rng, n):
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        a = rng.uniform(-1, 1, size=n)
        b = rng.uniform(-1, 1, size=n)
        pts = np.empty((n, 3))
        signs = np.where(faces % 2 == 0, 1.0, -1.0)
        for axis in range(3):
            on = faces // 2 == axis
            other = [ax for ax in range(3) if ax != axis]
            extents = [ex, ey, ez]
            pts[on, axis] = signs[on] * extents[axis]
            pts[on, other[0]] = a[on] * extents[other[0]]
            pts[on, other[1]] = b[on] * extents[other[1]]
        return pts + center

    return SurfacePart(label, float(face_areas.sum()), sample)


def _cylinder_part(label: str, center_xz, y0: float, y1: float, radius: float) -> SurfacePart:
    cx, cz = center_xz
    area = 2 * np.pi * radius * (y1 - y0)

    def sample(rng, n):
        theta = rng.uniform(0, 2 * np.pi, size=n)
        y = rng.uniform(y0, y1, size=n)
        return np.stack([cx + radius * np.cos(theta), y, cz + radius * np.sin(theta)], axis=1)

    return SurfacePart(label, float(area), sample)


def _disc_part(label: str, center, radius_x: float, radius_z: float) -> SurfacePart:
    center = np.asarray(center, dtype=np.float64)
    area = np.pi * radius_x * radius_z

    def sample(rng, n):
        rho = np.sqrt(rng.uniform(0, 1, size=n))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([radius_x * rho * np.cos(theta),
                        np.zeros(n),
                        radius_z * rho * np.sin(theta)], axis=1)
        return pts + center

    return SurfacePart(label, float(area), sample)


def _cone_part(label: str, center_xz, y0: float, height: float,
               r_bottom: float, r_top: float) -> SurfacePart:
    cx, cz = center_xz
    slant = np.sqrt(height * height + (r_top - r_bottom) ** 2)
    area = np.pi * (r_bottom + r_top) * slant

    def sample(rng, n):
        u = rng.uniform(0, 1, size=n)
        if abs(r_top - r_bottom) < 1e-12:
            t = u
        else:
            # area density grows linearly with local radius
            t = (-r_bottom + np.sqrt(r_bottom ** 2 + u * (r_top ** 2 - r_bottom ** 2))) / (r_top - r_bottom)
        r = r_bottom + t * (r_top - r_bottom)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([cx + r * np.cos(theta), y0 + t * height, cz + r * np.sin(theta)], axis=1)

    return SurfacePart(label, float(area), sample)


def _half_ellipsoid_part(label: str, a: float, b: float, c: float) -> SurfacePart:
    # Thomsen approximation for the surface area, halved for y <= 0
    p = 1.6075
    area = 2 * np.pi * ((a ** p * b ** p + a ** p * c ** p + b ** p * c ** p) / 3) ** (1 / p)
    w_max = max(a * b, b * c, a * c)

    def sample(rng, n):
        out = np.empty((n, 3))
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 64)
            d = rng.normal(size=(m, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            d[:, 1] = -np.abs(d[:, 1])  # lower hemisphere
            w = np.sqrt((d[:, 0] * b * c) ** 2 + (d[:, 1] * a * c) ** 2 + (d[:, 2] * a * b) ** 2)
            accept = rng.uniform(0, w_max, size=m) < w
            pts = np.stack([a * d[accept, 0], b * d[accept, 1], c * d[accept, 2]], axis=1)
            take = min(n - filled, pts.shape[0])
            out[filled:filled + take] = pts[:take]
            filled += take
        return out

    return SurfacePart(label, float(area), sample)


# -- category assemblies ------------------------------------------------------


def table_leg_centers(params: Dict[str, float]) -> np.ndarray:
    hw = params["slab_width"] / 2
    hd = params["slab_depth"] / 2
    inset = 2.0 * params["leg_radius"]
    x = hw - inset
    z = hd - inset
    return np.array([[x, 0.0, z], [x, 0.0, -z], [-x, 0.0, z], [-x, 0.0, -z]])


def build_parts(category: str, params: Dict[str, float]) -> List[SurfacePart]:
    if category == "table":
        leg_h = params["leg_height"]
        t = params["slab_thickness"]
        parts = [_box_part("slab", (0.0, leg_h + t / 2, 0.0),
                           (params["slab_width"] / 2, t / 2, params["slab_depth"] / 2))]
        for i, center in enumerate(table_leg_centers(params)):
            parts.append(_cylinder_part(f"leg{i}", (center[0], center[2]), 0.0, leg_h,
                                        params["leg_radius"]))
        return parts

    if category == "lamp":
        base_r, base_h = params["base_radius"], params["base_height"]
        pole_h = params["pole_height"]
        shade_h = params["shade_height"]
        return [
            _cylinder_part("base", (0.0, 0.0), 0.0, base_h, base_r),
            _disc_part("base_top", (0.0, base_h, 0.0), base_r, base_r),
            _cylinder_part("pole", (0.0, 0.0), base_h, base_h + pole_h, params["pole_radius"]),
            _cone_part("shade", (0.0, 0.0), base_h + pole_h - shade_h, shade_h,
                       params["shade_radius_bottom"], params["shade_radius_top"]),
        ]

    if category == "watercraft":
        a = params["hull_half_length"]
        b = params["hull_depth"]
        c = params["hull_half_width"]
        cab_l = params["cabin_half_length"]
        cab_h = params["cabin_height"]
        return [
            _half_ellipsoid_part("hull", a, b, c),
            _disc_part("deck", (0.0, 0.0, 0.0), a, c),
            _box_part("cabin", (0.0, cab_h / 2, 0.0), (cab_l, cab_h / 2, 0.6 * c)),
        ]

    raise ShapeError(f"unknown category {category!r}")


def generate_gt_labeled(spec: ShapeSpec, m_gt: int):
    """Normalized GT cloud plus per-point part labels and the geometry
    metadata needed to reason about part symmetries."""
    if m_gt < 2:
        raise ShapeError("m_gt must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC10]))
    params = spec.draw_params(rng)
    parts = build_parts(spec.category, params)
    areas = np.array([p.area for p in parts])
    counts = rng.multinomial(m_gt, areas / areas.sum())
    chunks, labels = [], []
    for part, count in zip(parts, counts):
        if count == 0:
            continue
        chunks.append(part.sample(rng, count))
        labels.extend([part.label] * count)
    raw = PointCloud(np.concatenate(chunks, axis=0))
    cloud, center, scale = normalize_unit_sphere(raw)
    info = {"params": params, "center": center, "scale": scale}
    return cloud, np.array(labels), info


def generate_gt(spec: ShapeSpec, m_gt: int) -> PointCloud:
    """Area-weighted uniform surface sampling of the parametric solid,
    normalized to the unit sphere. Deterministic for a fixed spec seed."""
    cloud, _, _ = generate_gt_labeled(spec, m_gt)
    return cloud
