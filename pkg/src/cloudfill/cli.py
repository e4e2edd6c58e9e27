"""Batch command-line interface: dataset generation, training, inference,
evaluation, rendering, and gradient verification.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser, names) -> None:
    """Flags mirror RunConfig fields one-to-one (dashes for underscores)."""
    import dataclasses

    from .config import RunConfig

    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    defaults = RunConfig()
    for name in names:
        f = fields[name]
        flag = "--" + name.replace("_", "-")
        default = getattr(defaults, name)
        if f.type == "bool" or isinstance(default, bool):
            parser.add_argument(flag, dest=name, action="store_true", default=None,
                                help=f"enable {name} (default: {default})")
        elif name in ("categories", "elevation_deg", "azimuth_deg"):
            parser.add_argument(flag, dest=name, type=str, default=None,
                                help=f"comma-separated (default: {default})")
        else:
            caster = type(default) if default is not None else float
            parser.add_argument(flag, dest=name, type=caster, default=None,
                                help=f"default: {default}")


_DATA_FLAGS = ("dataset_root", "categories", "n_train", "n_val", "n_test", "m_gt", "n_in",
               "image_size", "camera_distance", "radius", "k_blend", "gamma",
               "densify_factor", "seed")
_TRAIN_FLAGS = _DATA_FLAGS + (
    "n_coarse", "m_out", "l_retrieve", "global_dim", "embed_dim", "offset_scale",
    "k_pos", "k_cur", "eps", "alpha_part", "alpha_rend", "alpha_dens", "alpha_gen",
    "k_density", "ucd_squared", "lr", "lr_decay", "lr_decay_every", "epochs",
    "batch_size", "checkpoint_every", "disable_pos_retrieval", "disable_cur_retrieval",
    "disable_dare", "coarse_only", "out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudfill",
        description="Unsupervised single-view point cloud completion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", help="JSON config file (flags override it)")
    _add_config_flags(p, _DATA_FLAGS)

    p = sub.add_parser("train", help="train the completion model per category")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--category", help="train a single category instead of all")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    _add_config_flags(p, _TRAIN_FLAGS)

    p = sub.add_parser("complete", help="complete a partial cloud from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="JSON config matching the checkpoint (default: config.json next to it)")
    p.add_argument("--input", required=True, help="partial cloud PLY")
    p.add_argument("--output", required=True, help="output PLY for the completed cloud")

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="JSON config matching the checkpoint (default: config.json next to it)")
    p.add_argument("--category", help="restrict to one category")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out-dir", default=None, help="where to write metrics.csv / summary.json")

    p = sub.add_parser("render", help="render a cloud to depth + silhouette maps")
    p.add_argument("--input", required=True, help="cloud PLY")
    p.add_argument("--camera", help="camera JSON; otherwise built from viewpoint flags")
    p.add_argument("--distance", type=float, default=2.0)
    p.add_argument("--elevation", type=float, default=0.0, help="degrees")
    p.add_argument("--azimuth", type=float, default=0.0, help="degrees")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--radius", type=float, default=0.03, help="initial splat radius (NDC)")
    p.add_argument("--k-blend", type=int, default=8)
    p.add_argument("--gamma", type=float, default=1.0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--dare", action="store_true", help="density-adjusted radius (default)")
    mode.add_argument("--fixed-radius", action="store_true", help="keep the initial radius")
    p.add_argument("--compare-dare", action="store_true",
                   help="also report hole fractions for fixed vs density-adjusted radii")
    p.add_argument("--png", action="store_true", help="also write PNG previews")
    p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("gradcheck", help="run the full gradient verification suite")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    return parser


def _load_run_config(args, flag_names):
    from .config import make_config

    overrides = {name: getattr(args, name) for name in flag_names if getattr(args, name, None) is not None}
    return make_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .dataset import build_dataset

    cfg = _load_run_config(args, _DATA_FLAGS)
    etas = build_dataset(cfg.data_config())
    for cat, eta in sorted(etas.items()):
        print(f"{cat}: eta={eta:.6g}")
    print(f"dataset written to {cfg.dataset_root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train_category

    cfg = _load_run_config(args, _TRAIN_FLAGS)
    categories = [args.category] if args.category else list(cfg.categories)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    cfg.save_json(out_root / "config.json")
    for category in categories:
        history = train_category(cfg, category, out_root / category,
                                 resume=args.resume, progress=not args.quiet)
        final = history[-1]
        print(f"{category}: {len(history)} epochs, final l_part={final.l_part:.6f}")
    return EXIT_OK


def _config_for_checkpoint(args):
    from .config import ConfigError, make_config

    if args.config:
        return make_config(args.config, {})
    sidecar = Path(args.checkpoint).parent.parent / "config.json"
    if sidecar.exists():
        return make_config(sidecar, {})
    sidecar = Path(args.checkpoint).parent / "config.json"
    if sidecar.exists():
        return make_config(sidecar, {})
    raise ConfigError("no --config given and no config.json found next to the checkpoint")


def cmd_complete(args) -> int:
    from .cloud import read_ply, write_ply
    from .losses import ucd
    from .train import build_generator, complete_cloud

    cfg = _config_for_checkpoint(args)
    gen = build_generator(cfg, args.checkpoint)
    partial = read_ply(args.input)
    _, completed = complete_cloud(gen, partial)
    write_ply(args.output, completed)
    value = float(ucd(partial, completed, squared=True).data)
    print(f"squared UCD(input, output) = {value:.10g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .losses import write_metrics_csv, write_metrics_summary
    from .train import build_generator, evaluate_split

    cfg = _config_for_checkpoint(args)
    gen = build_generator(cfg, args.checkpoint)
    categories = [args.category] if args.category else list(cfg.categories)
    rows = []
    for category in categories:
        rows.extend(evaluate_split(cfg, gen, category, args.split))
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", rows)
    write_metrics_summary(out_dir / "summary.json", rows)
    mean_cd = float(np.mean([r["cd_l2"] for r in rows]) * 1e4)
    print(f"{len(rows)} samples, mean CD-L2 x 1e4 = {mean_cd:.4f}")
    print(f"metrics written to {out_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .camera import Camera, look_at, sample_viewpoint
    from .cloud import densify, read_ply
    from .images import write_pfm, write_pgm, write_png_preview
    from .render import (SplatConfig, binarize, compute_dare_radius,
                         estimate_eta, hole_fraction, render_depth,
                         render_silhouette)

    cloud = read_ply(args.input)
    if args.camera:
        cam = Camera.load_json(args.camera)
    else:
        elev = np.deg2rad(args.elevation)
        azim = np.deg2rad(args.azimuth)
        eye = args.distance * np.array([np.cos(elev) * np.cos(azim), np.sin(elev),
                                        np.cos(elev) * np.sin(azim)])
        cam = look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                      float(args.image_size), args.image_size, args.image_size)
    splat = SplatConfig(radius=args.radius, k_blend=args.k_blend, gamma=args.gamma)

    # with no category bank available, calibrate eta from this cloud's own
    # average foreground over a ring of seeded viewpoints: a view of average
    # density then keeps the initial radius, denser or sparser views adapt
    rng = np.random.default_rng(0)
    calibration = []
    for azimuth in np.linspace(0.0, 360.0, 8, endpoint=False):
        view = sample_viewpoint(rng, args.distance, (-30.0, 30.0), (azimuth, azimuth),
                                float(args.image_size), args.image_size, args.image_size)
        calibration.append(render_depth(cloud, view, splat))
    eta = estimate_eta(calibration, args.radius, len(cloud))

    use_dare = not args.fixed_radius
    if use_dare:
        radius, _ = compute_dare_radius(cloud.positions, cam, splat, eta)
    else:
        radius = args.radius
    depth = render_depth(cloud, cam, splat, radius_override=radius)
    sil = render_silhouette(cloud, cam, splat, radius_override=radius)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "depth.pfm", depth)
    write_pgm(out / "silhouette.pgm", sil)
    if args.png:
        write_png_preview(out / "depth.png", depth)
        write_png_preview(out / "silhouette.png", sil)
    print(f"rendered {len(cloud)} points at radius {radius:.6g} "
          f"({int(np.count_nonzero(depth > 0))} foreground px)")

    if args.compare_dare:
        dense = densify(cloud, 16, rng)
        reference = binarize(render_depth(dense, cam,
                                          SplatConfig(radius=args.radius / 2,
                                                      k_blend=args.k_blend, gamma=args.gamma)))
        fixed_mask = binarize(render_depth(cloud, cam, splat))
        dare_radius_value, _ = compute_dare_radius(cloud.positions, cam, splat, eta)
        dare_mask = binarize(render_depth(cloud, cam, splat, radius_override=dare_radius_value))
        frac_fixed = hole_fraction(fixed_mask, reference)
        frac_dare = hole_fraction(dare_mask, reference)
        print(f"hole fraction: fixed-radius={frac_fixed:.4f} dare={frac_dare:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradchecks

    def run():
        results = gradchecks.run_all()
        width = max(len(r.name) for r in results)
        failures = 0
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status}  {r.name:<{width}}  max rel error {r.max_rel_error:.3e}  (tol {r.threshold:g})")
            failures += 0 if r.passed else 1
        print(f"{len(results) - failures}/{len(results)} gradient checks passed")
        return failures

    if args.inject_fault:
        with gradchecks.corrupted_op():
            failures = run()
    else:
        failures = run()
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "complete": cmd_complete,
        "eval": cmd_eval,
        "render": cmd_render,
        "gradcheck": cmd_gradcheck,
    }

    from .adversarial import BankError
    from .camera import CameraError
    from .cloud import CloudError, PlyError
    from .config import ConfigError
    from .dataset import DatasetError
    from .images import ImageIOError
    from .nn import CheckpointError
    from .render import RenderError
    from .retrieval import PrnConfig  # noqa: F401  (ValueError from its validation)
    from .train import TrainingAbort

    try:
        return handlers[args.command](args)
    except (ConfigError, CameraError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, PlyError, CloudError, BankError, ImageIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingAbort, RenderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
