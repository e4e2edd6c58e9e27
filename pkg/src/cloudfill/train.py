"""Alternating adversarial training of the completion generator against
the per-category depth-image bank, plus inference and evaluation drivers.

Each batch: (1) generator forward per sample; (2) one fresh random
viewpoint per sample, depth-rendered with the density-adjusted radius;
(3) discriminator update on bank maps vs detached renders; (4) generator
update with gradients flowing through the renderer. Every source of
randomness is re-derived per (seed, category, epoch), so a run checkpointed
at an epoch boundary resumes bit for bit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import nn
from .adversarial import BankSampler, Discriminator, build_bank
from .camera import Camera, sample_viewpoint
from .cloud import PointCloud
from .config import RunConfig
from .dataset import DatasetError, Sample, list_samples, load_eta, load_gt, load_sample
from .losses import (LossWeights, MetricReport, density_loss, disc_loss,
                     evaluate, gen_adv_loss, partial_matching_loss,
                     rendering_loss, total_gen_loss, ucd)
from .render import (SplatConfig, render_depth_dare_diff, render_depth_diff,
                     render_silhouette_diff)
from .retrieval import Completer


class TrainingAbort(Exception):
    """Raised when a loss stops being finite; carries the sample id."""

    def __init__(self, sample_id: str, detail: str):
        super().__init__(f"non-finite loss at sample {sample_id}: {detail}")
        self.sample_id = sample_id


@dataclass
class EpochStats:
    epoch: int
    l_part: float
    l_rend: float
    l_dens: float
    l_gen: float
    l_disc: float
    wall_seconds: float
    ucd_out: float = float("nan")   # mean UCD(P_in, P_out); not part of the CSV contract


CSV_HEADER = ("epoch", "l_part", "l_rend", "l_dens", "l_gen", "l_disc", "wall_seconds")


@dataclass
class TrainSample:
    id: str
    partial: np.ndarray           # (n, 3)
    mask: np.ndarray              # (H, W) binary
    camera: Camera
    encodings: Tuple[np.ndarray, np.ndarray]


class CategoryTrainer:
    def __init__(self, cfg: RunConfig, category: str):
        self.cfg = cfg
        self.category = category
        self.cat_index = list(cfg.categories).index(category) if category in cfg.categories else 0
        self.splat = SplatConfig(radius=cfg.radius, k_blend=cfg.k_blend, gamma=cfg.gamma)
        self.weights = cfg.loss_weights()
        self.adversarial = self.weights.alpha_gen > 0

        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, self.cat_index, 0x1217]))
        self.generator = Completer(cfg.prn_config(), init_rng,
                                   disable_pos_retrieval=cfg.disable_pos_retrieval,
                                   disable_cur_retrieval=cfg.disable_cur_retrieval,
                                   coarse_only=cfg.coarse_only)
        self.discriminator = Discriminator(cfg.image_size, init_rng)
        self.opt_g = nn.Adam(self.generator.params(), lr=cfg.lr)
        self.opt_d = nn.Adam(self.discriminator.params(), lr=cfg.lr)
        self.epoch = 0

        self.samples = self._load_samples()
        self.eta = load_eta(cfg.dataset_root, category)
        if self.adversarial:
            self.bank = build_bank(cfg.dataset_root, category)
            if self.bank.eta is not None:
                self.eta = float(self.bank.eta)
        else:
            self.bank = None

    def _load_samples(self) -> List[TrainSample]:
        cfg = self.cfg
        out = []
        for sid in list_samples(cfg.dataset_root, self.category, "train"):
            s = load_sample(cfg.dataset_root, self.category, "train", sid)
            encodings = self.generator.input_encodings(s.partial, orientation=s.camera.eye)
            out.append(TrainSample(id=sid, partial=s.partial.positions,
                                   mask=(s.mask > 0.5).astype(np.float64),
                                   camera=s.camera, encodings=encodings))
        if not out:
            raise DatasetError(f"no training samples for category {self.category} under {cfg.dataset_root}")
        return out

    # -- schedule ------------------------------------------------------------

    def lr_at(self, epoch: int) -> float:
        return self.cfg.lr * (self.cfg.lr_decay ** (epoch // self.cfg.lr_decay_every))

    def _epoch_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.cfg.seed, self.cat_index, 0xE0, epoch]))

    # -- one optimization step -------------------------------------------------

    def _forward_sample(self, sample: TrainSample, rng: np.random.Generator):
        cfg = self.cfg
        p_in = PointCloud(sample.partial)
        p_c, p_out = self.generator.forward(p_in, sample.encodings)

        s_out = render_silhouette_diff(p_out, sample.camera, self.splat)
        s_c = s_out if self.generator.coarse_only else render_silhouette_diff(p_c, sample.camera, self.splat)

        in_t = ad.Tensor(sample.partial, dtype=p_out.dtype)
        ucd_in_out = ucd(in_t, p_out, squared=cfg.ucd_squared)
        l_part = ucd(in_t, p_c, squared=cfg.ucd_squared) + ucd_in_out
        l_rend = rendering_loss(sample.mask, s_out, s_c, cfg.mask_threshold)
        l_dens = density_loss(p_out, cfg.k_density)

        fake_map = None
        if self.adversarial:
            cam_r = sample_viewpoint(rng, cfg.camera_distance, cfg.elevation_deg,
                                     cfg.azimuth_deg, cfg.focal_pixels,
                                     cfg.image_size, cfg.image_size)
            if cfg.disable_dare:
                depth = render_depth_diff(p_out, cam_r, self.splat)
            else:
                depth = render_depth_dare_diff(p_out, cam_r, self.splat, self.eta)
            fake_map = depth * (1.0 / (cfg.camera_distance + 1.0))

        for name, loss in (("l_part", l_part), ("l_rend", l_rend), ("l_dens", l_dens)):
            if not np.isfinite(loss.data):
                raise TrainingAbort(sample.id, f"{name}={float(loss.data)}")
        return l_part, l_rend, l_dens, fake_map, float(ucd_in_out.data)

    def train_step(self, batch: List[TrainSample], rng: np.random.Generator) -> Dict[str, float]:
        cfg = self.cfg
        parts, rends, denss, fakes = [], [], [], []
        ids = []
        ucd_out_sum = 0.0
        for sample in batch:
            l_part, l_rend, l_dens, fake, ucd_in_out = self._forward_sample(sample, rng)
            parts.append(l_part)
            rends.append(l_rend)
            denss.append(l_dens)
            ids.append(sample.id)
            ucd_out_sum += ucd_in_out
            if fake is not None:
                fakes.append(ad.reshape(fake, (1, 1, cfg.image_size, cfg.image_size)))

        n = float(len(batch))
        l_part = sum(parts[1:], parts[0]) * (1.0 / n)
        l_rend = sum(rends[1:], rends[0]) * (1.0 / n)
        l_dens = sum(denss[1:], denss[0]) * (1.0 / n)

        l_disc_val = 0.0
        l_gen_val = 0.0
        if self.adversarial:
            fake_batch = ad.concatenate(fakes, axis=0) if len(fakes) > 1 else fakes[0]
            sampler = self._sampler
            real = sampler.sample(rng, len(batch))

            # discriminator sees detached renders
            self.opt_d.zero_grad()
            scores_real = self.discriminator(ad.Tensor(real[:, None, :, :], dtype=np.float32))
            scores_fake = self.discriminator(ad.Tensor(fake_batch.data))
            l_d = disc_loss(scores_real, scores_fake)
            if not np.isfinite(l_d.data):
                raise TrainingAbort(ids[0], f"l_disc={float(l_d.data)}")
            ad.backward(l_d)
            self.opt_d.step()
            l_disc_val = float(l_d.data)

            # generator update flows through the renderer into the updated critic
            scores_gen = self.discriminator(fake_batch)
            l_gen = gen_adv_loss(scores_gen)
            l_gen_val = float(l_gen.data)
        else:
            l_gen = ad.Tensor(np.zeros(()), dtype=np.float32)

        total = total_gen_loss(l_part, l_rend, l_dens, l_gen, self.weights)
        if not np.isfinite(total.data):
            raise TrainingAbort(ids[0], f"total={float(total.data)}")
        self.opt_g.zero_grad()
        if self.adversarial:
            self.opt_d.zero_grad()  # drop critic gradients spilled by the generator pass
        ad.backward(total)
        self.opt_g.step()
        if self.adversarial:
            self.opt_d.zero_grad()

        return {"l_part": float(l_part.data), "l_rend": float(l_rend.data),
                "l_dens": float(l_dens.data), "l_gen": l_gen_val, "l_disc": l_disc_val,
                "ucd_out": ucd_out_sum / n}

    # -- epochs ----------------------------------------------------------------

    def train_epoch(self, epoch: int) -> EpochStats:
        cfg = self.cfg
        start = time.time()
        rng = self._epoch_rng(epoch)
        lr = self.lr_at(epoch)
        self.opt_g.lr = lr
        self.opt_d.lr = lr
        if self.adversarial:
            self._sampler = BankSampler(self.bank, cfg.camera_distance)

        order = rng.permutation(len(self.samples))
        batch_size = min(cfg.batch_size, len(self.samples))
        sums = {k: 0.0 for k in ("l_part", "l_rend", "l_dens", "l_gen", "l_disc", "ucd_out")}
        n_batches = 0
        for start_idx in range(0, len(order), batch_size):
            batch = [self.samples[i] for i in order[start_idx:start_idx + batch_size]]
            stats = self.train_step(batch, rng)
            for k in sums:
                sums[k] += stats[k]
            n_batches += 1
        self.epoch = epoch + 1
        return EpochStats(epoch=epoch,
                          l_part=sums["l_part"] / n_batches,
                          l_rend=sums["l_rend"] / n_batches,
                          l_dens=sums["l_dens"] / n_batches,
                          l_gen=sums["l_gen"] / n_batches,
                          l_disc=sums["l_disc"] / n_batches,
                          wall_seconds=time.time() - start,
                          ucd_out=sums["ucd_out"] / n_batches)

    # -- checkpointing ----------------------------------------------------------

    def checkpoint_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for k, p in self.generator.params().items():
            arrays[f"gen.{k}"] = p.data
        for k, p in self.discriminator.params().items():
            arrays[f"{k}"] = p.data
        arrays.update(self.opt_g.state_arrays("opt_g"))
        arrays.update(self.opt_d.state_arrays("opt_d"))
        arrays["meta.epoch"] = np.array([float(self.epoch)], dtype=np.float32)
        return arrays

    def save_checkpoint(self, path) -> None:
        nn.save_checkpoint(path, self.checkpoint_arrays())

    def load_checkpoint(self, path) -> int:
        arrays = nn.load_checkpoint(path)
        nn.load_params({f"gen.{k}": p for k, p in self.generator.params().items()}, arrays)
        nn.load_params(dict(self.discriminator.params()), arrays)
        self.opt_g.load_state_arrays("opt_g", arrays)
        self.opt_d.load_state_arrays("opt_d", arrays)
        self.epoch = int(round(float(arrays["meta.epoch"][0])))
        return self.epoch


def train_category(cfg: RunConfig, category: str, out_dir,
                   resume: Optional[str] = None,
                   progress: bool = False) -> List[EpochStats]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = CategoryTrainer(cfg, category)
    start_epoch = 0
    history: List[EpochStats] = []
    csv_path = out / "losses.csv"

    if resume:
        start_epoch = trainer.load_checkpoint(resume)
        if csv_path.exists():
            with open(csv_path) as f:
                rows = list(csv.DictReader(f))
            history = [EpochStats(epoch=int(r["epoch"]), l_part=float(r["l_part"]),
                                  l_rend=float(r["l_rend"]), l_dens=float(r["l_dens"]),
                                  l_gen=float(r["l_gen"]), l_disc=float(r["l_disc"]),
                                  wall_seconds=float(r["wall_seconds"]))
                       for r in rows if int(r["epoch"]) < start_epoch]

    for epoch in range(start_epoch, cfg.epochs):
        stats = trainer.train_epoch(epoch)
        history.append(stats)
        _write_history(csv_path, history)
        if progress:
            print(f"[{category}] epoch {epoch}: part={stats.l_part:.5f} rend={stats.l_rend:.5f} "
                  f"dens={stats.l_dens:.6f} gen={stats.l_gen:.5f} disc={stats.l_disc:.5f} "
                  f"({stats.wall_seconds:.1f}s)", flush=True)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            trainer.save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.pccf")
    trainer.save_checkpoint(out / "checkpoint_final.pccf")
    return history


def _write_history(path, history: List[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for s in history:
            writer.writerow([s.epoch, f"{s.l_part:.10g}", f"{s.l_rend:.10g}", f"{s.l_dens:.10g}",
                             f"{s.l_gen:.10g}", f"{s.l_disc:.10g}", f"{s.wall_seconds:.4f}"])


# ---------------------------------------------------------------------------
# inference and evaluation


def build_generator(cfg: RunConfig, checkpoint_path) -> Completer:
    rng = np.random.default_rng(0)
    gen = Completer(cfg.prn_config(), rng,
                    disable_pos_retrieval=cfg.disable_pos_retrieval,
                    disable_cur_retrieval=cfg.disable_cur_retrieval,
                    coarse_only=cfg.coarse_only)
    arrays = nn.load_checkpoint(checkpoint_path)
    nn.load_params({f"gen.{k}": p for k, p in gen.params().items()}, arrays)
    return gen


def complete_cloud(gen: Completer, partial: PointCloud) -> Tuple[PointCloud, PointCloud]:
    """Run the generator on a partial cloud; returns (coarse, refined)."""
    with_encodings = None if gen.coarse_only else gen.input_encodings(partial)
    with ad.no_grad():
        p_c, p_out = gen.forward(partial, with_encodings)
    return PointCloud(p_c.data.astype(np.float64)), PointCloud(p_out.data.astype(np.float64))


def evaluate_split(cfg: RunConfig, gen: Completer, category: str, split: str) -> List[Dict]:
    rows = []
    for sid in list_samples(cfg.dataset_root, category, split):
        sample = load_sample(cfg.dataset_root, category, split, sid)
        gt = load_gt(cfg.dataset_root, category, sid)
        _, p_out = complete_cloud(gen, sample.partial)
        report = evaluate(p_out, gt)
        rows.append({"sample_id": f"{category}/{sid}", "category": category,
                     "cd_l2": report.cd_l2, "precision": report.precision,
                     "coverage": report.coverage, "ucd": report.ucd, "uhd": report.uhd})
    return rows
