"""Run configuration: one flat namespace shared by the JSON config file
and the command-line flags (flag overrides win over file values)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .dataset import DataConfig
from .losses import LossWeights
from .retrieval import PrnConfig
from .shapes import CATEGORIES


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # dataset
    dataset_root: str = "dataset"
    categories: Sequence[str] = CATEGORIES
    n_train: int = 64
    n_val: int = 8
    n_test: int = 8
    m_gt: int = 2048
    n_in: int = 256
    image_size: int = 64
    camera_distance: float = 2.0
    focal: Optional[float] = None       # None: equal to the image height
    radius: float = 0.03
    k_blend: int = 8
    gamma: float = 1.0
    densify_factor: int = 4
    elevation_deg: Tuple[float, float] = (-30.0, 30.0)
    azimuth_deg: Tuple[float, float] = (0.0, 360.0)

    # completion network
    n_coarse: int = 256
    m_out: int = 1024
    l_retrieve: int = 16
    global_dim: int = 128
    embed_dim: int = 1
    offset_scale: float = 0.2
    k_pos: int = 16
    k_cur: int = 24
    eps: float = 1e-8

    # losses
    alpha_part: float = 1.0
    alpha_rend: float = 1.0
    alpha_dens: float = 1.0
    alpha_gen: float = 1.0
    k_density: int = 8
    ucd_squared: bool = False
    mask_threshold: float = 0.5

    # optimizer and schedule
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 200
    epochs: int = 600
    batch_size: int = 8
    checkpoint_every: int = 50

    # ablation toggles
    disable_pos_retrieval: bool = False
    disable_cur_retrieval: bool = False
    disable_dare: bool = False
    coarse_only: bool = False

    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        for cat in self.categories:
            if cat not in CATEGORIES:
                raise ConfigError(f"categories: unknown category {cat!r}; expected one of {CATEGORIES}")
        try:
            self.prn_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc))
        for name in ("n_train", "n_val", "n_test", "m_gt", "image_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    @property
    def focal_pixels(self) -> float:
        return float(self.focal if self.focal is not None else self.image_size)

    def data_config(self) -> DataConfig:
        return DataConfig(root=self.dataset_root, categories=tuple(self.categories),
                          n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                          m_gt=self.m_gt, n_in=self.n_in, image_size=self.image_size,
                          camera_distance=self.camera_distance, focal=self.focal,
                          radius=self.radius, k_blend=self.k_blend, gamma=self.gamma,
                          densify_factor=self.densify_factor,
                          elevation_deg=tuple(self.elevation_deg),
                          azimuth_deg=tuple(self.azimuth_deg), seed=self.seed)

    def prn_config(self) -> PrnConfig:
        return PrnConfig(n_in=self.n_in, n_coarse=self.n_coarse, m_out=self.m_out,
                         l_retrieve=self.l_retrieve, global_dim=self.global_dim,
                         embed_dim=self.embed_dim, offset_scale=self.offset_scale,
                         k_pos=self.k_pos, k_cur=self.k_cur, eps=self.eps)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha_part=self.alpha_part, alpha_rend=self.alpha_rend,
                           alpha_dens=self.alpha_dens, alpha_gen=self.alpha_gen)

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True, default=list)
            f.write("\n")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    if name == "categories":
        if isinstance(value, str):
            value = [c for c in value.split(",") if c]
        return tuple(value)
    if name in ("elevation_deg", "azimuth_deg"):
        pair = value.split(",") if isinstance(value, str) else value
        if len(pair) != 2:
            raise ConfigError(f"{name}: expected two comma-separated values, got {value!r}")
        return (float(pair[0]), float(pair[1]))
    if name == "focal":
        if value in (None, "", "none"):
            return None
        return float(value)
    return value


def make_config(file_path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then config-file values, then flag overrides; unknown keys
    are rejected with the offending name."""
    values = {}
    if file_path:
        path = Path(file_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        values.update(loaded)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    kwargs = {}
    for name, value in values.items():
        if name not in _FIELDS:
            raise ConfigError(f"unknown config field {name!r}")
        kwargs[name] = _coerce(name, value)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
