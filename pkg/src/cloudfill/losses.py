"""Training losses and evaluation metrics for completion quality.

Training distances follow the unidirectional Chamfer form with unsquared
norms (a config switch selects squared); evaluation reports the squared
bidirectional decomposition (precision from prediction to reference,
coverage in the reverse direction) plus the unidirectional Hausdorff
distance. Nearest-neighbor assignments are hard argmins, so gradients
attach to the single closest pair, smallest index on ties.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Union

import numpy as np

from . import autodiff as ad
from .cloud import CloudError, PointCloud, neighbor_indices_fast

MASK_THRESHOLD = 0.5


@dataclass
class LossWeights:
    alpha_part: float = 1.0
    alpha_rend: float = 1.0
    alpha_dens: float = 1.0
    alpha_gen: float = 1.0

    def __post_init__(self):
        for name in ("alpha_part", "alpha_rend", "alpha_dens", "alpha_gen"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class MetricReport:
    cd_l2: float
    precision: float
    coverage: float
    ucd: float
    uhd: float


def _as_points_tensor(q) -> ad.Tensor:
    if isinstance(q, ad.Tensor):
        return q
    if isinstance(q, PointCloud):
        return ad.Tensor(q.positions, dtype=np.float64)
    return ad.Tensor(np.asarray(q), dtype=np.float64)


def ucd(q1, q2, squared: bool = False) -> ad.Tensor:
    """Mean nearest-neighbor distance from q1 to q2; differentiable with
    respect to both clouds through the matched pairs."""
    t1, t2 = _as_points_tensor(q1), _as_points_tensor(q2)
    if t1.data.shape[0] == 0 or t2.data.shape[0] == 0:
        raise CloudError("UCD requires nonempty clouds")
    d2 = ((t1.data[:, None, :] - t2.data[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)  # first occurrence wins ties
    matched = ad.gather(t2, idx)
    diff = t1 - matched
    sq = ad.reduce_sum(diff * diff, axis=1)
    if squared:
        return ad.reduce_mean(sq)
    return ad.reduce_mean(ad.sqrt(sq))


def partial_matching_loss(p_in, p_c, p_out, squared: bool = False) -> ad.Tensor:
    """Keeps observed points present in both predictions: the sum of the
    input-to-coarse and input-to-output unidirectional Chamfer terms."""
    return ucd(p_in, p_c, squared) + ucd(p_in, p_out, squared)


def rendering_loss(s0, s_out, s_c, mask_threshold: float = MASK_THRESHOLD) -> ad.Tensor:
    """Full-image MSE between the reference mask and the dense silhouette,
    plus the MSE against the sparse coarse silhouette restricted to the
    coarse foreground (both normalized by the full pixel count)."""
    s_out = s_out if isinstance(s_out, ad.Tensor) else ad.Tensor(np.asarray(s_out), dtype=np.float64)
    s_c = s_c if isinstance(s_c, ad.Tensor) else ad.Tensor(np.asarray(s_c), dtype=np.float64)
    s0 = np.asarray(s0.data if isinstance(s0, ad.Tensor) else s0)
    if s0.shape != s_out.data.shape or s0.shape != s_c.data.shape:
        raise ValueError(f"silhouette shapes differ: {s0.shape}, {s_out.data.shape}, {s_c.data.shape}")
    n_pixels = float(s0.size)
    s0_t = ad.Tensor(s0, dtype=s_out.dtype)
    term1 = ad.reduce_sum(ad.squared_difference(s0_t, s_out)) * (1.0 / n_pixels)
    mask = (s_c.data > mask_threshold).astype(s_c.data.dtype)
    term2 = ad.reduce_sum(ad.squared_difference(s0_t, s_c) * ad.Tensor(mask, dtype=s_c.dtype)) * (1.0 / n_pixels)
    return term1 + term2


def density_loss(points, k_d: int = 8) -> ad.Tensor:
    """Population variance of the per-point mean distance to the k_d
    nearest neighbors; zero for perfectly even spacing."""
    t = _as_points_tensor(points)
    n = t.data.shape[0]
    if k_d > n - 1:
        raise CloudError(f"density loss needs k_d <= N-1, got k_d={k_d} for N={n}")
    idx, _ = neighbor_indices_fast(t.data, k_d, exclude_self=True)
    centers = ad.gather(t, np.repeat(np.arange(n), k_d))
    nbrs = ad.gather(t, idx.reshape(-1))
    diff = centers - nbrs
    dists = ad.sqrt(ad.reduce_sum(diff * diff, axis=1))
    delta = ad.reduce_mean(ad.reshape(dists, (n, k_d)), axis=1)
    mu = ad.reduce_mean(delta)
    return ad.reduce_mean(ad.squared_difference(delta, mu))


def gen_adv_loss(scores_rendered: ad.Tensor) -> ad.Tensor:
    """Least-squares generator objective: rendered maps should score 1."""
    if scores_rendered.data.size == 0:
        raise ValueError("empty score batch")
    return ad.reduce_mean(ad.squared_difference(scores_rendered, ad.Tensor(np.ones_like(scores_rendered.data))))


def disc_loss(scores_real, scores_rendered) -> ad.Tensor:
    """Least-squares discriminator objective: real maps toward 1, rendered
    maps toward 0."""
    real = scores_real if isinstance(scores_real, ad.Tensor) else ad.Tensor(np.asarray(scores_real))
    fake = scores_rendered if isinstance(scores_rendered, ad.Tensor) else ad.Tensor(np.asarray(scores_rendered))
    if real.data.size == 0 or fake.data.size == 0:
        raise ValueError("empty score batch")
    ones = ad.Tensor(np.ones_like(real.data))
    return ad.reduce_mean(ad.squared_difference(real, ones)) + ad.reduce_mean(fake * fake)


def total_gen_loss(l_part, l_rend, l_dens, l_gen, w: LossWeights) -> ad.Tensor:
    return (w.alpha_part * l_part + w.alpha_rend * l_rend
            + w.alpha_dens * l_dens + w.alpha_gen * l_gen)


# ---------------------------------------------------------------------------
# evaluation metrics (no gradients)


def _min_dists_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2).min(axis=1)


def evaluate(p_out: Union[PointCloud, np.ndarray], p_gt: Union[PointCloud, np.ndarray]) -> MetricReport:
    a = p_out.positions if isinstance(p_out, PointCloud) else np.asarray(p_out, dtype=np.float64)
    b = p_gt.positions if isinstance(p_gt, PointCloud) else np.asarray(p_gt, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise CloudError("evaluation requires nonempty clouds")
    fwd = _min_dists_sq(a, b)
    bwd = _min_dists_sq(b, a)
    precision = float(fwd.mean())
    coverage = float(bwd.mean())
    return MetricReport(
        cd_l2=precision + coverage,
        precision=precision,
        coverage=coverage,
        ucd=precision,
        uhd=float(np.sqrt(fwd.max())),
    )


METRIC_FIELDS = ("cd_l2", "precision", "coverage", "ucd", "uhd")


def write_metrics_csv(path, rows: List[Dict]) -> None:
    """Per-sample metrics with header sample_id, cd_l2, precision,
    coverage, ucd, uhd."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("sample_id",) + METRIC_FIELDS)
        for row in rows:
            # shortest exact decimals: the summary recomputes from these
            writer.writerow([row["sample_id"]] + [repr(float(row[k])) for k in METRIC_FIELDS])


def summarize_metrics(rows: List[Dict]) -> Dict:
    """Per-category and overall means scaled by 1e4."""
    def mean_block(subset):
        return {k: float(np.mean([r[k] for r in subset]) * 1e4) for k in METRIC_FIELDS}

    categories = sorted({r.get("category", "") for r in rows})
    summary = {"scale": 1e4, "overall": mean_block(rows), "per_category": {}}
    for cat in categories:
        subset = [r for r in rows if r.get("category", "") == cat]
        if subset:
            summary["per_category"][cat] = mean_block(subset)
    return summary


def write_metrics_summary(path, rows: List[Dict]) -> None:
    with open(path, "w") as f:
        json.dump(summarize_metrics(rows), f, indent=2, sort_keys=True)
        f.write("\n")
