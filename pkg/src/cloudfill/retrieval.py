"""Completion generator: global shape encoding, coarse decoding, cross-
attention retrieval of correlated local pattern encodings, and an
upsample-fuse-offset refiner.

The coarse cloud's own encodings are recomputed from detached coordinates
every forward pass; gradients reach the coarse decoder through the refined
points' replicated coordinates, never through neighbor search or normal
estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import nn
from .cloud import PointCloud
from .encodings import (DEFAULT_EPS, DEFAULT_K_CURVATURE, DEFAULT_K_POSITION,
                        curvature_encoding, estimate_normals, position_encoding)


@dataclass
class PrnConfig:
    n_in: int = 256
    n_coarse: int = 256
    m_out: int = 1024
    l_retrieve: int = 16
    global_dim: int = 128
    embed_dim: int = 1
    offset_scale: float = 0.2
    k_pos: int = DEFAULT_K_POSITION
    k_cur: int = DEFAULT_K_CURVATURE
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if min(self.n_in, self.n_coarse, self.m_out, self.l_retrieve,
               self.global_dim, self.embed_dim) < 1:
            raise ValueError("all PrnConfig counts must be >= 1")
        if self.m_out % self.n_coarse != 0:
            raise ValueError(f"m_out={self.m_out} must be divisible by n_coarse={self.n_coarse}")
        if self.l_retrieve > self.n_in:
            raise ValueError(f"l_retrieve={self.l_retrieve} exceeds n_in={self.n_in}")

    @property
    def upsample_ratio(self) -> int:
        return self.m_out // self.n_coarse


def replica_grid(ratio: int) -> np.ndarray:
    """Fixed 2-D code distinguishing the replicas of each coarse point; the
    first `ratio` cells of a square grid over [-0.5, 0.5]^2."""
    side = int(np.ceil(np.sqrt(ratio)))
    axis = np.linspace(-0.5, 0.5, side) if side > 1 else np.zeros(1)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)[:ratio]


class GlobalEncoder:
    """Permutation-invariant cloud feature: shared per-point stack, max
    pool, global concat, second stack, final max pool."""

    def __init__(self, global_dim: int, rng: np.random.Generator):
        self.stack1 = nn.MLP([3, 64, 128], rng)
        self.stack2 = nn.MLP([256, 128, global_dim], rng)

    def __call__(self, points: ad.Tensor) -> ad.Tensor:
        n = points.data.shape[0]
        feat = self.stack1(points)                               # (N, 128)
        pooled = ad.reduce_max(feat, axis=0, keepdims=True)      # (1, 128)
        tiled = ad.gather(pooled, np.zeros(n, dtype=np.int64))   # (N, 128)
        both = ad.concatenate([feat, tiled], axis=1)             # (N, 256)
        feat2 = self.stack2(both)
        return ad.reduce_max(feat2, axis=0)                      # (global_dim,)

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return {**self.stack1.params(f"{prefix}.stack1"), **self.stack2.params(f"{prefix}.stack2")}


class CoarseDecoder:
    """Three affine layers (one nonlinearity, between the first two)
    mapping the global feature to n_coarse points."""

    def __init__(self, global_dim: int, n_coarse: int, rng: np.random.Generator):
        self.n_coarse = n_coarse
        self.fc1 = nn.Linear(global_dim, 256, rng)
        self.fc2 = nn.Linear(256, 512, rng)
        self.fc3 = nn.Linear(512, n_coarse * 3, rng)

    def __call__(self, o: ad.Tensor) -> ad.Tensor:
        h = ad.relu(self.fc1(ad.reshape(o, (1, -1))))
        h = self.fc2(h)
        out = self.fc3(h)
        return ad.reshape(out, (self.n_coarse, 3))

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2"),
                **self.fc3.params(f"{prefix}.fc3")}


class EncodingAttention:
    """Scalar-encoding cross attention: projects coarse encodings to
    queries and input encodings to keys, then softmax over the input axis."""

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        self.embed_dim = embed_dim
        self.query_mlp = nn.MLP([1, 8, embed_dim], rng)
        self.key_mlp = nn.MLP([1, 8, embed_dim], rng)

    def weights(self, f_in: ad.Tensor, f_c: ad.Tensor) -> ad.Tensor:
        """(n_coarse, n_in) attention rows, each a distribution over the
        input points."""
        g = self.query_mlp(ad.reshape(f_c, (-1, 1)))          # (n_coarse, e)
        h = self.key_mlp(ad.reshape(f_in, (-1, 1)))           # (n_in, e)
        scores = (g @ ad.transpose(h)) * (1.0 / np.sqrt(self.embed_dim))
        return ad.softmax(scores, axis=1)

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return {**self.query_mlp.params(f"{prefix}.query"), **self.key_mlp.params(f"{prefix}.key")}


def retrieve_top_l(weights: Union[ad.Tensor, np.ndarray], f_in: Union[ad.Tensor, np.ndarray],
                   l_retrieve: int) -> Tuple[ad.Tensor, np.ndarray]:
    """Gather, per coarse point, the l_retrieve input encodings with the
    largest attention weights (descending weight, ties to the smaller
    index). Gradients flow through the gathered encoding values only."""
    w = weights.data if isinstance(weights, ad.Tensor) else np.asarray(weights)
    if l_retrieve > w.shape[1]:
        raise ValueError(f"l_retrieve={l_retrieve} exceeds available inputs {w.shape[1]}")
    order = np.argsort(-w, axis=1, kind="stable")
    idx = order[:, :l_retrieve]
    f_t = f_in if isinstance(f_in, ad.Tensor) else ad.Tensor(np.asarray(f_in), dtype=np.float64)
    return ad.gather(f_t, idx), idx


class Refiner:
    """Replicates each coarse point, fuses its retrieved encodings with the
    global feature and a per-replica grid code, and predicts bounded
    point-wise offsets."""

    def __init__(self, config: PrnConfig, rng: np.random.Generator):
        self.config = config
        feat_dim = 3 + 2 * config.l_retrieve + 2 + config.global_dim + 2
        self.mlp = nn.MLP([feat_dim, 128, 64, 3], rng)
        self.grid = replica_grid(config.upsample_ratio)

    def __call__(self, p_c: ad.Tensor, e_pos: ad.Tensor, e_cur: ad.Tensor,
                 f_pos_c: np.ndarray, f_cur_c: np.ndarray, o: ad.Tensor) -> ad.Tensor:
        cfg = self.config
        n_c, r = cfg.n_coarse, cfg.upsample_ratio
        m = n_c * r
        rep = np.repeat(np.arange(n_c), r)

        base = ad.gather(p_c, rep)                                   # (m, 3)
        e_pos_r = ad.gather(e_pos, rep)                              # (m, L)
        e_cur_r = ad.gather(e_cur, rep)
        scalars = np.stack([np.repeat(f_pos_c, r), np.repeat(f_cur_c, r)], axis=1)
        o_rep = ad.gather(ad.reshape(o, (1, -1)), np.zeros(m, dtype=np.int64))
        grid = np.tile(self.grid, (n_c, 1))

        dtype = p_c.dtype
        feat = ad.concatenate([
            base, e_pos_r, e_cur_r,
            ad.Tensor(scalars, dtype=dtype),
            o_rep,
            ad.Tensor(grid, dtype=dtype),
        ], axis=1)
        offsets = ad.tanh(self.mlp(feat)) * cfg.offset_scale
        return base + offsets

    def params(self, prefix: str) -> Dict[str, ad.Tensor]:
        return self.mlp.params(f"{prefix}.mlp")


class Completer:
    """Full generator: partial cloud in, (coarse, refined) clouds out."""

    def __init__(self, config: PrnConfig, rng: np.random.Generator,
                 disable_pos_retrieval: bool = False, disable_cur_retrieval: bool = False,
                 coarse_only: bool = False):
        self.config = config
        self.encoder = GlobalEncoder(config.global_dim, rng)
        self.decoder = CoarseDecoder(config.global_dim, config.n_coarse, rng)
        self.pos_attention = EncodingAttention(config.embed_dim, rng)
        self.cur_attention = EncodingAttention(config.embed_dim, rng)
        self.refiner = Refiner(config, rng)
        self.disable_pos_retrieval = disable_pos_retrieval
        self.disable_cur_retrieval = disable_cur_retrieval
        self.coarse_only = coarse_only

    def params(self) -> Dict[str, ad.Tensor]:
        out: Dict[str, ad.Tensor] = {}
        out.update(self.encoder.params("encoder"))
        out.update(self.decoder.params("decoder"))
        out.update(self.pos_attention.params("pos_attention"))
        out.update(self.cur_attention.params("cur_attention"))
        out.update(self.refiner.params("refiner"))
        return out

    def input_encodings(self, p_in: PointCloud,
                        orientation: Union[str, np.ndarray] = "centroid") -> Tuple[np.ndarray, np.ndarray]:
        """Position and curvature encodings of the partial input; constant
        per sample, so callers normally compute them once and reuse."""
        cfg = self.config
        f_pos = position_encoding(p_in, cfg.k_pos)
        normals = estimate_normals(p_in, cfg.k_cur, orientation)
        f_cur = curvature_encoding(p_in, normals, cfg.k_cur, cfg.eps)
        return f_pos, f_cur

    def coarse_encodings(self, p_c_data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        cloud = PointCloud(p_c_data)
        f_pos = position_encoding(cloud, cfg.k_pos)
        normals = estimate_normals(cloud, cfg.k_cur, "centroid")
        f_cur = curvature_encoding(cloud, normals, cfg.k_cur, cfg.eps)
        return f_pos, f_cur

    def forward(self, p_in: Union[PointCloud, np.ndarray],
                input_encodings: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                dtype=np.float32) -> Tuple[ad.Tensor, ad.Tensor]:
        cfg = self.config
        cloud = p_in if isinstance(p_in, PointCloud) else PointCloud(np.asarray(p_in))
        points = ad.Tensor(cloud.positions, dtype=dtype)

        o = self.encoder(points)
        p_c = self.decoder(o)
        if self.coarse_only:
            return p_c, p_c

        if input_encodings is None:
            input_encodings = self.input_encodings(cloud)
        f_pos_in, f_cur_in = input_encodings
        f_pos_c, f_cur_c = self.coarse_encodings(p_c.data.astype(np.float64))

        if self.disable_pos_retrieval:
            e_pos = ad.Tensor(np.zeros((cfg.n_coarse, cfg.l_retrieve)), dtype=dtype)
            f_pos_c = np.zeros_like(f_pos_c)
        else:
            w_pos = self.pos_attention.weights(ad.Tensor(f_pos_in, dtype=dtype),
                                               ad.Tensor(f_pos_c, dtype=dtype))
            e_pos, _ = retrieve_top_l(w_pos, ad.Tensor(f_pos_in, dtype=dtype), cfg.l_retrieve)

        if self.disable_cur_retrieval:
            e_cur = ad.Tensor(np.zeros((cfg.n_coarse, cfg.l_retrieve)), dtype=dtype)
            f_cur_c = np.zeros_like(f_cur_c)
        else:
            w_cur = self.cur_attention.weights(ad.Tensor(f_cur_in, dtype=dtype),
                                               ad.Tensor(f_cur_c, dtype=dtype))
            e_cur, _ = retrieve_top_l(w_cur, ad.Tensor(f_cur_in, dtype=dtype), cfg.l_retrieve)

        p_out = self.refiner(p_c, e_pos, e_cur, f_pos_c, f_cur_c, o)
        return p_c, p_out
