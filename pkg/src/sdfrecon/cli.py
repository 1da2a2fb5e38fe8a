"""Command-line entry point.

Subcommands: ``synth`` (generate a dataset), ``train``, ``extract`` (mesh +
DSM from a checkpoint), ``render`` (images from a checkpoint), ``eval``
(metrics against a ground-truth DSM), ``profile`` (timing report and loss
curves from a run directory).

Global behavior: a run manifest is written into the output directory before
any work; non-empty output directories are refused without ``--force``; exit
codes are 0 (ok), 2 (validation/config), 3 (numeric fault), 4 (I/O or format).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, fileio, renderer, surface, synth, trainer
from .errors import FormatError, NumericFaultError, SdfReconError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFAULT_TOLERANCES = list(range(1, 31))  # 1..30 GSD


def _prepare_out_dir(out, force: bool) -> None:
    if os.path.exists(out) and os.listdir(out) and not force:
        raise ValidationError(f"output directory {out!r} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)


def write_manifest(out, command: str, args: argparse.Namespace) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": getattr(args, "seed", None),
        "config": getattr(args, "config", None),
        "inputs": {
            k: getattr(args, k)
            for k in ("dataset", "checkpoint", "dsm", "gt", "run")
            if getattr(args, k, None)
        },
        "out": getattr(args, "out", None),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config_kv(path) -> dict:
    return fileio.read_kv_file(path) if path else {}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    kv = _load_config_kv(args.config)
    scene, rig, tp_spec, moving_shadows = synth.parse_scene_config(kv)
    if args.seed is not None:
        seed = args.seed
    else:
        seed = 0
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "synth", args)
    meta = synth.write_dataset(args.out, scene, rig, tp_spec, seed=seed,
                               moving_shadows=moving_shadows)
    print(f"dataset written to {args.out}: {meta['n_cameras']} cameras, "
          f"{meta['n_tiepoints']} tie points, gsd {meta['gsd']}")
    return EXIT_OK


def cmd_train(args) -> int:
    kv = _load_config_kv(args.config)
    cfg = trainer.TrainConfig.from_kv(kv)
    if args.seed is not None:
        cfg = trainer.TrainConfig(**{**cfg.to_kv(), "seed": args.seed})
    if args.no_depth_priors:
        # Photometric-only baseline: no depth terms, no warm-up stage, and
        # the sphere geometric init standing in for stage 1 (without it an
        # empty-scene init renders nothing and receives no gradient).
        cfg = trainer.TrainConfig(
            **{**cfg.to_kv(), "depth_priors": False, "stage1_epochs": 0,
               "tiepoint_ray_fraction": 0.0, "geometric_init": True}
        )
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "train", args)

    cameras, images, tiepoints, gsd, aoi = trainer.load_dataset(args.dataset)
    if cfg.gsd > 0:
        gsd = cfg.gsd
    data = trainer.prepare_scene(cameras, images, tiepoints, gsd, aoi)
    result = trainer.train(
        data,
        cfg,
        log_path=os.path.join(args.out, "train_log.txt"),
        checkpoint_dir=os.path.join(args.out, "checkpoints"),
        resume_from=args.resume,
        epochs_override=args.epochs,
        progress_every=args.progress_every,
    )
    with open(os.path.join(args.out, "profile.json"), "w", encoding="utf-8") as f:
        json.dump(result.profile.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(result.profile.summary())
    return EXIT_OK


def _field_from_checkpoint(path):
    field, _, epoch, cfg, norm, world_gsd = trainer.load_checkpoint(path)
    return field, epoch, cfg, norm, world_gsd


def cmd_extract(args) -> int:
    field, _, _, norm, world_gsd = _field_from_checkpoint(args.checkpoint)
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "extract", args)
    resolution = args.resolution or min(256, int(round(2.0 / field.leaf)) + 1)
    mesh = surface.extract_mesh(field, resolution, norm)
    if mesh.is_empty:
        print("field has no zero crossing: wrote empty mesh")
    surface.save_mesh_ply(os.path.join(args.out, "mesh.ply"), mesh)
    if not mesh.is_empty and args.aoi:
        aoi = tuple(float(v) for v in args.aoi.split(","))
        dsm = surface.extract_dsm(mesh, args.cell or world_gsd, aoi)
        surface.save_dsm(os.path.join(args.out, "dsm.asc"), dsm)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh)} triangles (grid {resolution}^3)")
    return EXIT_OK


def cmd_render(args) -> int:
    field, _, _, norm, _ = _field_from_checkpoint(args.checkpoint)
    cameras, _, _, _, _ = trainer.load_dataset(args.dataset)
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "render", args)
    ids = [args.view] if args.view is not None else cameras.ids
    for view_id in ids:
        view = cameras[view_id]
        rgb, depth, alpha = renderer.render_image(field, view, norm, stride=args.stride)
        fileio.write_image(os.path.join(args.out, f"render_{view_id:04d}.ppm"), rgb)
        fileio.write_depth_grid(os.path.join(args.out, f"depth_{view_id:04d}.bin"), depth)
        fileio.write_image(
            os.path.join(args.out, f"alpha_{view_id:04d}.ppm"),
            np.repeat(alpha[:, :, None], 3, axis=2),
        )
        print(f"rendered view {view_id} (stride {args.stride})")
    return EXIT_OK


def _plot_metric_curves(path, acc: surface.MetricCurve, comp: surface.MetricCurve, nmad_gsd):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(acc.tolerances, acc.values, "-o", ms=3, label="accuracy")
    ax.plot(comp.tolerances, comp.values, "--s", ms=3, label="completeness")
    ax.set_xlabel("tolerance [GSD]")
    ax.set_ylabel("fraction")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    title = f"NMAD = {nmad_gsd:.2f} GSD" if nmad_gsd is not None else "no NMAD"
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "eval", args)
    if args.checkpoint:
        field, _, _, norm, world_gsd = _field_from_checkpoint(args.checkpoint)
        gsd = args.gsd or world_gsd
        gt = surface.load_dsm(args.gt)
        resolution = args.resolution or min(256, int(round(2.0 / field.leaf)) + 1)
        mesh = surface.extract_mesh(field, resolution, norm)
        if mesh.is_empty:
            raise ValidationError("field has no surface to evaluate")
        surface.save_mesh_ply(os.path.join(args.out, "mesh.ply"), mesh)
        ny, nx = gt.shape
        aoi = (
            gt.origin[0], gt.origin[0] + nx * gt.cell,
            gt.origin[1], gt.origin[1] + ny * gt.cell,
        )
        dsm = surface.extract_dsm(mesh, gt.cell, aoi)
        surface.save_dsm(os.path.join(args.out, "dsm.asc"), dsm)
    else:
        if not args.dsm:
            raise ValidationError("eval needs --checkpoint or --dsm")
        dsm = surface.load_dsm(args.dsm)
        gt = surface.load_dsm(args.gt)
        gsd = args.gsd or dsm.cell

    tolerances = DEFAULT_TOLERANCES if args.tolerances is None else [
        float(v) for v in args.tolerances.split(",")
    ]
    acc = surface.accuracy(dsm, gt, tolerances, gsd)
    comp = surface.completeness(dsm, gt, tolerances, gsd)
    try:
        nmad_val = surface.nmad(dsm, gt, band=args.nmad_band * gsd)
        nmad_gsd = nmad_val / gsd
    except ValidationError:
        nmad_val = nmad_gsd = None

    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("tolerance_gsd,accuracy,completeness\n")
        for tol, a, c in zip(tolerances, acc.values, comp.values):
            f.write(f"{tol},{a!r},{c!r}\n")
    with open(os.path.join(args.out, "nmad.txt"), "w", encoding="utf-8") as f:
        if nmad_val is None:
            f.write("nmad nan (no in-band residuals)\n")
        else:
            f.write(f"nmad_world {nmad_val!r}\nnmad_gsd {nmad_gsd!r}\n")

    diff = surface.dsm_diff(dsm, gt)
    surface.save_dsm(os.path.join(args.out, "dsm_diff.asc"), diff)
    fileio.write_image(
        os.path.join(args.out, "dsm_diff.ppm"), surface.diff_image(diff, 10.0 * gsd)
    )
    _plot_metric_curves(os.path.join(args.out, "metrics.png"), acc, comp, nmad_gsd)
    msg = f"accuracy@2gsd={acc.values[min(1, len(acc.values) - 1)]:.3f}"
    if nmad_gsd is not None:
        msg += f" nmad={nmad_gsd:.2f}gsd"
    print(msg)
    return EXIT_OK


def _plot_loss_curves(path, rows: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [r["epoch"] for r in rows]
    for key in ("total", "rgb", "eik", "surf", "fs", "tr"):
        vals = [r[key] for r in rows]
        if any(v > 0 for v in vals):
            ax.plot(epochs, vals, label=key, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_profile(args) -> int:
    run = args.run
    profile_path = os.path.join(run, "profile.json")
    log_path = os.path.join(run, "train_log.txt")
    if not os.path.exists(profile_path):
        raise FormatError("run directory has no profile.json (train first)", profile_path)
    _prepare_out_dir(args.out, args.force)
    write_manifest(args.out, "profile", args)
    with open(profile_path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    report = trainer.ProfileReport(seconds=payload["seconds"], epochs=payload["epochs"])
    summary = report.summary()
    with open(os.path.join(args.out, "profile_report.txt"), "w", encoding="utf-8") as f:
        f.write(summary + "\n")
    if os.path.exists(log_path):
        rows = trainer.parse_log(log_path)
        if rows:
            _plot_loss_curves(os.path.join(args.out, "loss_curves.png"), rows)
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfrecon",
        description="Depth-supervised neural SDF reconstruction: synthesize, train, extract, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)

    def add_common(p, needs_out=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: SDFRECON_THREADS or torch default)")
        p.add_argument("--force", action="store_true", help="allow non-empty output dir")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)

    p = sub.add_parser("train", help="train a field on a dataset")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--no-depth-priors", action="store_true",
                   help="photometric-only baseline: zero depth losses, skip stage 1")
    p.add_argument("--epochs", type=int, default=None, help="stop early at this epoch")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--progress-every", type=int, default=0)

    p = sub.add_parser("extract", help="mesh (and optional DSM) from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--aoi", default=None, help="xmin,xmax,ymin,ymax for the DSM")
    p.add_argument("--cell", type=float, default=None)

    p = sub.add_parser("render", help="render views from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, default=None)
    p.add_argument("--stride", type=int, default=1)

    p = sub.add_parser("eval", help="accuracy/completeness/NMAD against a GT DSM")
    add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--dsm", default=None, help="evaluate an existing DSM instead")
    p.add_argument("--gt", required=True)
    p.add_argument("--gsd", type=float, default=None)
    p.add_argument("--tolerances", default=None, help="comma list in GSD (default 1..30)")
    p.add_argument("--nmad-band", type=float, default=30.0, help="NMAD band in GSD")

    p = sub.add_parser("profile", help="report phase timings of a training run")
    add_common(p)
    p.add_argument("--run", required=True, help="training output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    threads = args.threads
    if threads is None:
        env = os.environ.get("SDFRECON_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        import torch

        torch.set_num_threads(max(1, threads))

    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "extract": cmd_extract,
        "render": cmd_render,
        "eval": cmd_eval,
        "profile": cmd_profile,
    }
    try:
        return handlers[args.command](args)
    except NumericFaultError as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except SdfReconError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
