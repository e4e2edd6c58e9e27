"""Synthetic dataset construction: single-view scan simulation and
on-disk layout.

Each sample is produced by rendering one depth map of the (densified)
ground-truth cloud from a random viewpoint and back-projecting its
foreground pixels; the partial cloud, raw depth, binary mask and camera
all derive from that single view. Ground truth lives in a separate
evaluation-only tree that no training path reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import Camera, backproject, sample_viewpoint
from .cloud import PointCloud, densify, read_ply, subsample, write_ply
from .images import read_pgm, read_pfm, write_pgm, write_pfm
from .render import (RenderError, SplatConfig, binarize, estimate_eta,
                     rasterize, render_depth, render_depth_dare)
from .shapes import CATEGORIES, ShapeSpec, generate_gt


class DatasetError(Exception):
    pass


@dataclass
class DataConfig:
    root: str = "dataset"
    categories: Sequence[str] = CATEGORIES
    n_train: int = 64
    n_val: int = 8
    n_test: int = 8
    m_gt: int = 2048
    n_in: int = 256
    image_size: int = 64
    camera_distance: float = 2.0
    focal: Optional[float] = None       # defaults to the image height
    radius: float = 0.03
    k_blend: int = 8
    gamma: float = 1.0
    densify_factor: int = 4
    elevation_deg: Tuple[float, float] = (-30.0, 30.0)
    azimuth_deg: Tuple[float, float] = (0.0, 360.0)
    seed: int = 0

    def __post_init__(self):
        for cat in self.categories:
            if cat not in CATEGORIES:
                raise DatasetError(f"unknown category {cat!r}; expected one of {CATEGORIES}")

    def splat(self) -> SplatConfig:
        return SplatConfig(radius=self.radius, k_blend=self.k_blend, gamma=self.gamma)

    @property
    def focal_pixels(self) -> float:
        return float(self.focal if self.focal is not None else self.image_size)


@dataclass
class Sample:
    id: str
    category: str
    partial: PointCloud
    raw_depth: np.ndarray
    mask: np.ndarray
    camera: Camera
    gt: Optional[PointCloud] = None
    subsample_replaced: bool = False


def synthesize_scan(gt: PointCloud, rng: np.random.Generator, cfg: DataConfig,
                    eta: Optional[float] = None, sample_id: str = "",
                    category: str = "") -> Sample:
    """Simulate one single-view scan: sample a viewpoint, render a dense
    depth map (density-adjusted radius when eta is given), back-project,
    and subsample to the configured partial size. Resamples the viewpoint
    up to 10 times if the object misses the frustum entirely."""
    splat = cfg.splat()
    for attempt in range(10):
        cam = sample_viewpoint(rng, cfg.camera_distance, cfg.elevation_deg, cfg.azimuth_deg,
                               cfg.focal_pixels, cfg.image_size, cfg.image_size)
        dense = densify(gt, cfg.densify_factor, rng)
        if eta is None:
            depth = render_depth(dense, cam, splat)
        else:
            depth = render_depth_dare(dense, cam, splat, eta)
        # quantize to the stored precision so the on-disk depth map,
        # back-projection, and partial cloud agree exactly
        depth = depth.astype(np.float32).astype(np.float64)
        if np.count_nonzero(depth > 0) > 0:
            points = backproject(depth, cam)
            partial, replaced = subsample(PointCloud(points), cfg.n_in, rng)
            return Sample(id=sample_id, category=category, partial=partial,
                          raw_depth=depth, mask=binarize(depth), camera=cam,
                          gt=gt, subsample_replaced=replaced)
    raise DatasetError(f"sample {sample_id}: no viewpoint hit the frustum in 10 attempts")


def _sample_seed(cfg_seed: int, category_index: int, split_index: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg_seed, category_index, split_index, index]).generate_state(1)[0])


def _sample_rng(cfg_seed: int, category_index: int, split_index: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed, category_index, split_index, index, 0xA5]))


SPLITS = ("train", "val", "test")


def build_dataset(cfg: DataConfig) -> Dict[str, float]:
    """Write the full dataset tree and per-category bank manifests.
    Returns the estimated eta per category. Deterministic for a fixed
    seed, byte for byte."""
    root = Path(cfg.root)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    etas: Dict[str, float] = {}
    dense_points = cfg.m_gt * cfg.densify_factor

    for ci, category in enumerate(cfg.categories):
        # ids are unique within a category across splits
        ids: Dict[Tuple[str, int], str] = {}
        next_id = 0
        for split in SPLITS:
            for k in range(counts[split]):
                ids[(split, k)] = f"{next_id:04d}"
                next_id += 1

        clouds: Dict[Tuple[str, int], PointCloud] = {}
        for si, split in enumerate(SPLITS):
            for k in range(counts[split]):
                spec = ShapeSpec(category, seed=_sample_seed(cfg.seed, ci, si, k))
                clouds[(split, k)] = generate_gt(spec, cfg.m_gt)

        # first pass over the training split at the initial radius fixes eta
        probe_maps = []
        for k in range(counts["train"]):
            rng = _sample_rng(cfg.seed, ci, 0, k)
            probe = synthesize_scan(clouds[("train", k)], rng, cfg, eta=None,
                                    sample_id=ids[("train", k)], category=category)
            probe_maps.append(probe.raw_depth)
        eta = estimate_eta(probe_maps, cfg.radius, dense_points)
        etas[category] = eta

        bank_ids: List[str] = []
        bank_paths: List[str] = []
        for si, split in enumerate(SPLITS):
            for k in range(counts[split]):
                sid = ids[(split, k)]
                rng = _sample_rng(cfg.seed, ci, si, k)
                sample = synthesize_scan(clouds[(split, k)], rng, cfg, eta=eta,
                                         sample_id=sid, category=category)
                sdir = root / category / split / sid
                sdir.mkdir(parents=True, exist_ok=True)
                try:
                    write_ply(sdir / "partial.ply", sample.partial)
                    write_pfm(sdir / "depth.pfm", sample.raw_depth)
                    write_pgm(sdir / "mask.pgm", sample.mask)
                    sample.camera.save_json(sdir / "camera.json")
                    gt_dir = root / category / "gt"
                    gt_dir.mkdir(parents=True, exist_ok=True)
                    write_ply(gt_dir / f"{sid}.ply", sample.gt)
                except OSError as exc:
                    raise DatasetError(f"failed writing sample {category}/{split}/{sid}: {exc}") from exc
                if split == "train":
                    bank_ids.append(sid)
                    bank_paths.append(f"train/{sid}/depth.pfm")

        manifest = {
            "category": category,
            "sample_ids": bank_ids,
            "maps": bank_paths,
            "eta": eta,
        }
        with open(root / category / "bank.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    return etas


def list_samples(root, category: str, split: str) -> List[str]:
    split_dir = Path(root) / category / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing dataset split directory {split_dir}")
    return sorted(p.name for p in split_dir.iterdir() if p.is_dir())


def load_sample(root, category: str, split: str, sample_id: str) -> Sample:
    sdir = Path(root) / category / split / sample_id
    if not sdir.is_dir():
        raise DatasetError(f"missing sample directory {sdir}")
    partial = read_ply(sdir / "partial.ply")
    depth = read_pfm(sdir / "depth.pfm")
    mask = read_pgm(sdir / "mask.pgm")
    cam = Camera.load_json(sdir / "camera.json")
    return Sample(id=sample_id, category=category, partial=partial,
                  raw_depth=depth, mask=mask, camera=cam)


def load_gt(root, category: str, sample_id: str) -> PointCloud:
    path = Path(root) / category / "gt" / f"{sample_id}.ply"
    if not path.exists():
        raise DatasetError(f"missing ground-truth cloud {path}")
    return read_ply(path)


def load_eta(root, category: str) -> float:
    path = Path(root) / category / "bank.json"
    if not path.exists():
        raise DatasetError(f"missing bank manifest {path}")
    with open(path) as f:
        return float(json.load(f)["eta"])
