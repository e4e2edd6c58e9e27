"""Per-category banks of raw single-view depth maps and the convolutional
discriminator that separates them from rendered predictions.

A bank holds exactly the depth maps the training partials were
back-projected from, one per sample, in lexicographic sample-id order.
Real maps are served without replacement within an epoch and normalized
the same way rendered maps are before scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .images import read_pfm


class BankError(Exception):
    pass


@dataclass
class ImageBank:
    category: str
    sample_ids: List[str]
    maps: np.ndarray              # (B, H, W) raw depth values
    eta: Optional[float] = None

    def __len__(self) -> int:
        return self.maps.shape[0]


def build_bank(dataset_root, category: str) -> ImageBank:
    """Load a category's bank from its manifest; falls back to scanning the
    train split when no manifest exists. Ordering is lexicographic by
    sample id either way."""
    root = Path(dataset_root) / category
    manifest = root / "bank.json"
    if manifest.exists():
        with open(manifest) as f:
            meta = json.load(f)
        ids = list(meta["sample_ids"])
        paths = [root / p for p in meta["maps"]]
        eta = meta.get("eta")
    else:
        train = root / "train"
        if not train.is_dir():
            raise BankError(f"no bank manifest and no train split under {root}")
        ids = sorted(p.name for p in train.iterdir() if p.is_dir())
        paths = [train / sid / "depth.pfm" for sid in ids]
        eta = None
    maps = []
    for sid, path in zip(ids, paths):
        if not Path(path).exists():
            raise BankError(f"bank entry {sid}: missing depth map {path}")
        maps.append(read_pfm(path))
    if not maps:
        raise BankError(f"category {category}: empty bank")
    return ImageBank(category=category, sample_ids=ids, maps=np.stack(maps), eta=eta)


class BankSampler:
    """Uniform without-replacement sampling within an epoch; reshuffles
    when an epoch's worth of maps has been served."""

    def __init__(self, bank: ImageBank, camera_distance: float):
        if len(bank) == 0:
            raise BankError("cannot sample from an empty bank")
        self.normalized = bank.maps.astype(np.float64) / (camera_distance + 1.0)
        self._order: Optional[np.ndarray] = None
        self._cursor = 0

    def sample(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        n = self.normalized.shape[0]
        if batch > n:
            raise BankError(f"batch {batch} exceeds bank size {n} for without-replacement sampling")
        if self._order is None or self._cursor + batch > n:
            self._order = rng.permutation(n)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + batch]
        self._cursor += batch
        return self.normalized[idx]


def sample_real(sampler: BankSampler, rng: np.random.Generator, batch: int) -> np.ndarray:
    return sampler.sample(rng, batch)


class Discriminator:
    """Five stride-2 convolutions with leaky-relu between them, mean-pooled
    to one scalar score per input map."""

    CHANNELS = (1, 16, 32, 64, 128, 256)

    def __init__(self, image_size: int, rng: np.random.Generator, slope: float = 0.2):
        if image_size % 32 != 0:
            raise ValueError(f"image size must be divisible by 32, got {image_size}")
        self.image_size = image_size
        self.slope = slope
        chans = self.CHANNELS
        self.convs = [nn.Conv2d(chans[i], chans[i + 1], kernel=4, stride=2, padding=1, rng=rng)
                      for i in range(5)]

    def __call__(self, maps: ad.Tensor) -> ad.Tensor:
        """Scores (B,) for a batch (B, 1, H, W) at the configured size."""
        shape = maps.data.shape
        if len(shape) != 4 or shape[1] != 1 or shape[2] != self.image_size or shape[3] != self.image_size:
            raise ValueError(
                f"discriminator expects (B, 1, {self.image_size}, {self.image_size}) maps, got {shape}")
        h = maps
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ad.leaky_relu(h, self.slope)
        return ad.reduce_mean(h, axis=(1, 2, 3))

    def params(self) -> Dict[str, ad.Tensor]:
        out: Dict[str, ad.Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"disc.conv{i}"))
        return out

    def score_arrays(self, maps: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(ad.Tensor(maps[:, None, :, :])).data
