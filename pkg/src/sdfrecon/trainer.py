"""Two-stage training loop with Adam, checkpointing, logging, and profiling.

Stage 1 (geometric warm-up) optimizes only the tie-point depth terms plus
smoothness; stage 2 adds photometric supervision through volume rendering.
An "epoch" is one optimizer step on one ray batch.

Reproducibility contract: every random draw of epoch ``e`` comes from a
generator seeded by ``(seed, e)``, so a run is a pure function of
(dataset, config) and resuming from a checkpoint continues bit-identically.
The training log is line-delimited
``epoch stage lr L_total L_rgb L_eik L_surf L_fs L_tr wall_ms``; every column
except the wall time is deterministic.

Checkpoints are self-describing binary blobs (see ``save_checkpoint``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import fileio, losses as losses_mod, renderer, scene as scene_mod
from .errors import FormatError, NumericFaultError, ValidationError
from .field import FieldConfig, SdfField

PHASES = ("data", "sampling", "field", "loss", "gradient", "update")

CHECKPOINT_MAGIC = b"SDFRCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every knob of a training run; flat key=value addressable."""

    # Optimization
    batch_rays: int = 4096
    lr0: float = 5e-4
    decay_rate: float = 0.1
    stage1_epochs: int = 1000
    total_epochs: int = 30000
    tiepoint_ray_fraction: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 5000
    # Loss weights (per stage where they differ)
    lambda_eik_stage1: float = 0.0
    lambda_surf_stage1: float = 1e-2
    lambda_eik_stage2: float = 5e-4
    lambda_surf_stage2: float = 5e-3
    lambda_fs: float = 10.0
    lambda_tr: float = 60.0
    tr_gsd: float = 30.0
    r_surf_gsd: float = 35.0
    m_tr: int = 8
    m_fs: int = 8
    eik_points: int = 256
    smooth_points: int = 256
    # Field architecture
    field_levels: int = 8
    field_base_resolution: int = 16
    field_table_log2: int = 19
    field_feature_dim: int = 2
    geo_hidden: int = 256
    geo_feature_dim: int = 15
    app_hidden: int = 256
    app_use_normal: bool = True
    app_use_viewdir: bool = True
    beta0: float = 1e-3
    sdf_bias: float = 0.1
    # Sampler
    n_probe: int = 128
    max_refinement_rounds: int = 4
    refine_per_round: int = 128
    sampler_error_tolerance: float = 0.01
    n_importance: int = 48
    n_uniform: int = 16
    # Modes
    depth_priors: bool = True
    geometric_init: bool = False
    audit_single_writer: bool = False
    gsd: float = 0.0  # world-unit GSD; 0 = take from dataset metadata

    def __post_init__(self):
        if self.batch_rays <= 0:
            raise ValidationError("batch_rays must be positive")
        if not (0.0 <= self.tiepoint_ray_fraction <= 1.0):
            raise ValidationError("tiepoint_ray_fraction must be in [0, 1]")
        if not (0 <= self.stage1_epochs < self.total_epochs):
            raise ValidationError("need 0 <= stage1_epochs < total_epochs")

    def loss_weights(self, stage: int) -> losses_mod.LossWeights:
        if stage == 1:
            lam_eik, lam_surf = self.lambda_eik_stage1, self.lambda_surf_stage1
        elif stage == 2:
            lam_eik, lam_surf = self.lambda_eik_stage2, self.lambda_surf_stage2
        else:
            raise ValidationError(f"unknown training stage {stage}")
        lam_fs, lam_tr = (self.lambda_fs, self.lambda_tr) if self.depth_priors else (0.0, 0.0)
        return losses_mod.LossWeights(
            lambda_eik=lam_eik,
            lambda_surf=lam_surf,
            lambda_fs=lam_fs,
            lambda_tr=lam_tr,
            r_surf=self.r_surf_gsd,
            tr=self.tr_gsd,
        )

    def sampler_config(self) -> renderer.SamplerConfig:
        return renderer.SamplerConfig(
            n_probe=self.n_probe,
            max_refinement_rounds=self.max_refinement_rounds,
            refine_per_round=self.refine_per_round,
            error_tolerance=self.sampler_error_tolerance,
            n_importance=self.n_importance,
            n_uniform=self.n_uniform,
        )

    def field_config(self, gsd_normalized: float) -> FieldConfig:
        return FieldConfig(
            n_levels=self.field_levels,
            base_resolution=self.field_base_resolution,
            leaf_size=gsd_normalized,
            table_size_log2=self.field_table_log2,
            feature_dim=self.field_feature_dim,
            geo_hidden=self.geo_hidden,
            geo_feature_dim=self.geo_feature_dim,
            app_hidden=self.app_hidden,
            app_use_normal=self.app_use_normal,
            app_use_viewdir=self.app_use_viewdir,
            beta0=self.beta0,
            sdf_bias=self.sdf_bias,
        )

    def stage_of(self, epoch: int) -> int:
        return 1 if epoch < self.stage1_epochs else 2

    def to_kv(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
        values = {}
        for key, raw in kv.items():
            if key not in fields:
                raise ValidationError(f"unknown train config key {key!r}")
            ftype = fields[key].type
            if ftype in ("bool", bool):
                if str(raw).lower() not in ("true", "false", "0", "1", "yes", "no"):
                    raise ValidationError(f"bad boolean for {key!r}: {raw!r}")
                values[key] = str(raw).lower() in ("true", "1", "yes")
            elif ftype in ("int", int):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        return TrainConfig(**values)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Exponential decay: lr0 * decay_rate^(epoch / total_epochs)."""
    if not (0 <= epoch <= cfg.total_epochs):
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.lr0 * cfg.decay_rate ** (epoch / cfg.total_epochs)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @staticmethod
    def for_field(field: SdfField) -> "AdamState":
        return AdamState(m=field.zero_like_params(), v=field.zero_like_params(), step=0)


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    hyper: tuple[float, float, float] = (0.9, 0.999, 1e-8),
    diagnostics: dict | None = None,
) -> AdamState:
    """Standard Adam update with bias correction, in place on the params.

    The single writer of parameter tensors: nothing else in the package
    mutates them during training.
    """
    b1, b2, eps = hyper
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValidationError(f"gradient shape mismatch for {name!r}")
            if not torch.isfinite(g).all():
                detail = f" (loss terms: {diagnostics})" if diagnostics else ""
                raise NumericFaultError(f"non-finite gradient for {name!r}{detail}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedScene:
    """Normalized, tensorized scene ready for batch assembly."""

    norm: scene_mod.SceneNormalization
    gsd: float  # normalized units
    world_gsd: float
    aoi: tuple
    photo_origins: torch.Tensor
    photo_dirs: torch.Tensor
    photo_tnear: torch.Tensor
    photo_tfar: torch.Tensor
    photo_rgb: torch.Tensor
    photo_view: torch.Tensor  # (P,) view ids
    sup_origins: torch.Tensor
    sup_dirs: torch.Tensor
    sup_tnear: torch.Tensor
    sup_tfar: torch.Tensor
    sup_dobs: torch.Tensor  # observed depth as ray parameter
    sup_view: torch.Tensor

    @property
    def n_supervised(self) -> int:
        return len(self.sup_dobs)


def load_dataset(dataset_dir):
    """Load a dataset directory written by the synthesizer (or hand-made)."""
    meta_path = os.path.join(dataset_dir, "meta.txt")
    meta = fileio.read_kv_file(meta_path) if os.path.exists(meta_path) else {}
    gsd = float(meta.get("gsd", 1.0))
    cameras, images, tiepoints = scene_mod.load_scene(
        os.path.join(dataset_dir, "cameras.txt"),
        os.path.join(dataset_dir, "images"),
        os.path.join(dataset_dir, "tiepoints.txt"),
        gsd=gsd,
    )
    aoi = None
    if "aoi" in meta:
        aoi = tuple(float(v) for v in meta["aoi"].split())
    return cameras, images, tiepoints, gsd, aoi


def prepare_scene(cameras, images, tiepoints, gsd: float, aoi=None) -> PreparedScene:
    """Normalize the scene and precompute the photometric/supervised ray banks."""
    norm = scene_mod.normalize_scene(cameras, tiepoints)
    gsd_n = gsd * norm.scale

    po, pd, pn, pf, pc, pv = [], [], [], [], [], []
    for view in cameras:
        uu, vv = np.meshgrid(np.arange(view.width), np.arange(view.height))
        pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
        origins, dirs, tn, tf, valid = scene_mod.camera_rays(view, pixels, norm)
        rgb = images[view.id].reshape(-1, 3)
        po.append(origins[valid])
        pd.append(dirs[valid])
        pn.append(tn[valid])
        pf.append(tf[valid])
        pc.append(rgb[valid])
        pv.append(np.full(int(valid.sum()), view.id))

    so, sd, sn, sf, sobs, sv = [], [], [], [], [], []
    for tp in tiepoints:
        if not tp.depths:
            scene_mod.tiepoint_depths(tp, cameras)
        for (view_id, pixel), depth in zip(tp.observations, tp.depths):
            view = cameras[view_id]
            origins, dirs, tn, tf, valid = scene_mod.camera_rays(view, pixel[None, :], norm)
            if not valid[0]:
                continue
            cos = float(dirs[0] @ view.viewing_axis)
            if cos <= 1e-9:
                continue
            t_obs = depth * norm.scale / cos
            so.append(origins[0])
            sd.append(dirs[0])
            sn.append(tn[0])
            sf.append(tf[0])
            sobs.append(t_obs)
            sv.append(view_id)

    f32 = torch.float32
    return PreparedScene(
        norm=norm,
        gsd=gsd_n,
        world_gsd=gsd,
        aoi=aoi,
        photo_origins=torch.as_tensor(np.concatenate(po), dtype=f32),
        photo_dirs=torch.as_tensor(np.concatenate(pd), dtype=f32),
        photo_tnear=torch.as_tensor(np.concatenate(pn), dtype=f32),
        photo_tfar=torch.as_tensor(np.concatenate(pf), dtype=f32),
        photo_rgb=torch.as_tensor(np.concatenate(pc), dtype=f32),
        photo_view=torch.as_tensor(np.concatenate(pv), dtype=torch.long),
        sup_origins=torch.as_tensor(np.array(so), dtype=f32).reshape(-1, 3),
        sup_dirs=torch.as_tensor(np.array(sd), dtype=f32).reshape(-1, 3),
        sup_tnear=torch.as_tensor(np.array(sn), dtype=f32),
        sup_tfar=torch.as_tensor(np.array(sf), dtype=f32),
        sup_dobs=torch.as_tensor(np.array(sobs), dtype=f32),
        sup_view=torch.as_tensor(np.array(sv, dtype=np.int64), dtype=torch.long),
    )


def epoch_generator(seed: int, epoch: int, salt: int = 0) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed((seed * 2654435761 + epoch * 97 + salt * 7919 + 13) % (2**63 - 1))
    return gen


@dataclass
class RayBatch:
    """One epoch's assembled inputs (placement randomness already applied)."""

    stage: int
    photo_idx: torch.Tensor | None = None
    photo_rgb: torch.Tensor | None = None
    depth_samples: losses_mod.DepthSupervisionSamples | None = None
    eik_points: torch.Tensor | None = None
    smooth_band_points: torch.Tensor | None = None
    smooth_offsets: torch.Tensor | None = None
    photo_views: torch.Tensor | None = None
    sup_views: torch.Tensor | None = None


def make_batch(data: PreparedScene, cfg: TrainConfig, epoch: int,
               gen: torch.Generator | None = None) -> RayBatch:
    """Assemble one epoch's rays; deterministic given (seed, epoch).

    In stage 1 the tie-point fraction is forced to 1 (no photometric term);
    with depth priors disabled it is forced to 0.
    """
    stage = cfg.stage_of(epoch)
    gen = gen or epoch_generator(cfg.seed, epoch)

    if cfg.depth_priors and data.n_supervised == 0:
        raise ValidationError("dataset has no usable tie-point rays")
    if stage == 1 and not cfg.depth_priors:
        raise ValidationError("stage 1 requires depth priors (use stage1_epochs = 0)")

    frac = 1.0 if stage == 1 else (cfg.tiepoint_ray_fraction if cfg.depth_priors else 0.0)
    n_sup = int(round(cfg.batch_rays * frac))
    n_photo = cfg.batch_rays - n_sup
    if stage == 1 and n_sup == 0:
        raise ValidationError("stage 1 batch would contain no supervised rays")

    batch = RayBatch(stage=stage)
    tr_dist = cfg.tr_gsd * data.gsd
    if n_sup > 0:
        idx = torch.randint(data.n_supervised, (n_sup,), generator=gen)
        batch.sup_views = data.sup_view[idx]
        batch.depth_samples = losses_mod.build_depth_samples(
            data.sup_origins[idx],
            data.sup_dirs[idx],
            data.sup_dobs[idx],
            data.sup_tnear[idx],
            data.sup_tfar[idx],
            tr_dist,
            cfg.m_tr,
            cfg.m_fs,
            gen,
        )
    if n_photo > 0:
        pidx = torch.randint(len(data.photo_rgb), (n_photo,), generator=gen)
        batch.photo_idx = pidx
        batch.photo_rgb = data.photo_rgb[pidx]
        batch.photo_views = data.photo_view[pidx]

    if cfg.eik_points > 0:
        batch.eik_points = (torch.rand((cfg.eik_points, 3), generator=gen) * 2 - 1)

    # Smoothness anchors: observed-depth surface estimates plus band samples;
    # stage 2 additionally gets rendered surface points (added by the step).
    anchors = []
    if batch.depth_samples is not None:
        ds = batch.depth_samples
        obs_pts = ds.origins + ds.d_obs.unsqueeze(1) * ds.directions
        anchors.append(obs_pts)
        band = ds.band_positions()
        take = min(cfg.smooth_points, band.shape[0])
        sel = torch.randperm(band.shape[0], generator=gen)[:take]
        anchors.append(band[sel])
    if anchors:
        pts = torch.cat(anchors, dim=0).clamp(-1.0, 1.0)
        take = min(cfg.smooth_points, pts.shape[0])
        sel = torch.randperm(pts.shape[0], generator=gen)[:take]
        pts = pts[sel]
        offsets = losses_mod.sample_ball_offsets(
            pts.shape[0], cfg.r_surf_gsd * data.gsd, gen, pts.dtype
        )
        keep = (pts + offsets).abs().amax(dim=1) <= 1.0
        batch.smooth_band_points = pts[keep]
        batch.smooth_offsets = offsets[keep]
    return batch


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, field: SdfField, adam: AdamState, epoch: int,
                    cfg: TrainConfig, norm: scene_mod.SceneNormalization,
                    world_gsd: float) -> None:
    """Versioned binary blob: magic, header length, JSON header, raw tensors.

    Layout: 8-byte magic ``SDFRCKPT``, little-endian uint64 header size, the
    UTF-8 JSON header, then each tensor's raw little-endian bytes at the
    offsets recorded in the header. Loading is bit-identical.
    """
    tensors: dict[str, torch.Tensor] = {}
    for name, p in field.params.items():
        tensors[f"param.{name}"] = p.detach()
    for name in field.params:
        tensors[f"adam_m.{name}"] = adam.m[name]
        tensors[f"adam_v.{name}"] = adam.v[name]

    entries = []
    offset = 0
    for name, t in tensors.items():
        nbytes = t.numel() * t.element_size()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": str(t.dtype).replace("torch.", ""),
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": {
            "epoch": epoch,
            "stage": cfg.stage_of(epoch) if epoch < cfg.total_epochs else 2,
            "adam_step": adam.step,
            "field_config": field.config.to_dict(),
            "train_config": cfg.to_kv(),
            "norm_scale": norm.scale,
            "norm_translation": [float(v) for v in norm.translation],
            "world_gsd": world_gsd,
        },
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for t in tensors.values():
            f.write(t.contiguous().numpy().tobytes())


def load_checkpoint(path):
    """Restore (field, adam_state, epoch, cfg, norm, world_gsd) from a blob."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"not a checkpoint (magic {magic!r})", path)
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}", path)
        payload = f.read()

    meta = header["meta"]
    cfg = TrainConfig(**{k: v for k, v in meta["train_config"].items()})
    fcfg = FieldConfig.from_dict(meta["field_config"])
    field = SdfField(fcfg, seed=0)
    adam = AdamState.for_field(field)
    adam.step = meta["adam_step"]

    dtype_map = {"float32": np.float32, "float64": np.float64}
    values = {}
    for e in header["tensors"]:
        arr = np.frombuffer(
            payload, dtype=dtype_map[e["dtype"]], count=int(np.prod(e["shape"])) if e["shape"] else 1,
            offset=e["offset"],
        ).reshape(e["shape"])
        values[e["name"]] = torch.from_numpy(arr.copy())
    field.load_param_values({k[len("param."):]: v for k, v in values.items() if k.startswith("param.")})
    with torch.no_grad():
        for name in field.params:
            adam.m[name].copy_(values[f"adam_m.{name}"])
            adam.v[name].copy_(values[f"adam_v.{name}"])
    norm = scene_mod.SceneNormalization(
        scale=meta["norm_scale"], translation=np.array(meta["norm_translation"])
    )
    return field, adam, int(meta["epoch"]), cfg, norm, float(meta["world_gsd"])


# ---------------------------------------------------------------------------
# Profiling
# ---------------------------------------------------------------------------


@dataclass
class ProfileReport:
    seconds: dict[str, float]
    epochs: int

    @property
    def total(self) -> float:
        return sum(self.seconds.values())

    @property
    def fractions(self) -> dict[str, float]:
        total = self.total
        if total <= 0:
            return {k: 0.0 for k in self.seconds}
        return {k: v / total for k, v in self.seconds.items()}

    @property
    def sampling_fraction(self) -> float:
        return self.fractions.get("sampling", 0.0)

    def summary(self) -> str:
        lines = [f"profile over {self.epochs} epochs, total {self.total:.2f} s"]
        for phase in PHASES:
            sec = self.seconds.get(phase, 0.0)
            frac = self.fractions.get(phase, 0.0)
            lines.append(f"  {phase:<10s} {sec:10.3f} s  {100 * frac:6.2f} %")
        lines.append(f"sampling share of training time: {100 * self.sampling_fraction:.1f} %")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"seconds": self.seconds, "fractions": self.fractions, "epochs": self.epochs}


def profile(timings: dict[str, float], epochs: int) -> ProfileReport:
    """Build the per-phase report from accumulated wall times."""
    return ProfileReport(seconds={k: timings.get(k, 0.0) for k in PHASES}, epochs=epochs)


class _Timer:
    def __init__(self, sink: dict, phase: str):
        self.sink = sink
        self.phase = phase

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.phase] = self.sink.get(self.phase, 0.0) + (time.perf_counter() - self.t0)


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


LOG_COLUMNS = "epoch stage lr L_total L_rgb L_eik L_surf L_fs L_tr wall_ms"


def format_log_row(epoch, stage, lr, terms, wall_ms) -> str:
    vals = [terms.get(k, 0.0) for k in ("total", "rgb", "eik", "surf", "fs", "tr")]
    cols = [str(epoch), str(stage), f"{lr:.9e}"] + [f"{v:.9e}" for v in vals] + [f"{wall_ms:.3f}"]
    return " ".join(cols)


def parse_log(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            rows.append(
                {
                    "epoch": int(parts[0]),
                    "stage": int(parts[1]),
                    "lr": float(parts[2]),
                    "total": float(parts[3]),
                    "rgb": float(parts[4]),
                    "eik": float(parts[5]),
                    "surf": float(parts[6]),
                    "fs": float(parts[7]),
                    "tr": float(parts[8]),
                    "wall_ms": float(parts[9]),
                }
            )
    return rows


@dataclass
class TrainResult:
    field: SdfField
    adam: AdamState
    log_rows: list
    profile: ProfileReport
    norm: scene_mod.SceneNormalization
    data: PreparedScene
    cfg: TrainConfig


def pretrain_sphere(field: SdfField, steps: int = 200, radius: float = 0.5,
                    lr: float = 1e-3, seed: int = 0) -> None:
    """Optional geometric initialization: fit the SDF to a centered sphere."""
    adam = AdamState.for_field(field)
    for step in range(steps):
        gen = epoch_generator(seed, step, salt=17)
        pts = torch.rand((1024, 3), generator=gen, dtype=field.dtype) * 2 - 1
        target = pts.norm(dim=1) - radius
        sdf = field.eval_sdf_only(pts)
        loss = (sdf - target).square().mean()
        grads_list = torch.autograd.grad(loss, list(field.params.values()), allow_unused=True)
        grads = {
            k: (torch.zeros_like(p) if g is None else g)
            for (k, p), g in zip(field.params.items(), grads_list)
        }
        adam_step(field.params, grads, adam, lr)


def train(
    data: PreparedScene,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    resume_from=None,
    epochs_override: int | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run the two-stage optimization.

    Emits per-epoch loss rows (appended to ``log_path`` when given), writes
    checkpoints every ``checkpoint_every`` epochs plus a final one, and
    accumulates the per-phase profile. A non-finite loss or gradient halts
    with :class:`NumericFaultError`; previously written checkpoints are
    retained.
    """
    if resume_from is not None:
        field, adam, start_epoch, saved_cfg, _, _ = load_checkpoint(resume_from)
        cfg = saved_cfg
    else:
        fcfg = cfg.field_config(data.gsd)
        field = SdfField(fcfg, seed=cfg.seed)
        if cfg.geometric_init:
            pretrain_sphere(field, seed=cfg.seed)
        adam = AdamState.for_field(field)
        start_epoch = 0

    end_epoch = cfg.total_epochs if epochs_override is None else epochs_override
    sampler_cfg = cfg.sampler_config()
    hyper = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    timings: dict[str, float] = {}
    log_rows: list[str] = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit_checkpoint(epoch):
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(
                os.path.join(checkpoint_dir, f"ckpt_{epoch:07d}.bin"),
                field, adam, epoch, cfg, data.norm, data.world_gsd,
            )

    try:
        for epoch in range(start_epoch, end_epoch):
            t_epoch = time.perf_counter()
            stage = cfg.stage_of(epoch)
            weights = cfg.loss_weights(stage)
            lr = lr_schedule(cfg, epoch)

            with _Timer(timings, "data"):
                batch = make_batch(data, cfg, epoch)

            loss_batch = losses_mod.LossBatch(
                eik_points=batch.eik_points,
                smooth_points=batch.smooth_band_points,
                smooth_offsets=batch.smooth_offsets,
                depth=batch.depth_samples,
            )
            if stage == 2 and batch.photo_idx is not None:
                pidx = batch.photo_idx
                o = data.photo_origins[pidx]
                d = data.photo_dirs[pidx]
                with _Timer(timings, "sampling"):
                    t, _ = renderer.sample_rays(
                        field, o, d, data.photo_tnear[pidx], data.photo_tfar[pidx],
                        None, sampler_cfg, epoch_generator(cfg.seed, epoch, salt=1),
                    )
                loss_batch.render_origins = o
                loss_batch.render_directions = d
                loss_batch.render_t = t
                loss_batch.target_rgb = batch.photo_rgb
            else:
                timings.setdefault("sampling", 0.0)

            if cfg.audit_single_writer:
                checksum_before = field.param_checksum()

            with _Timer(timings, "field"):
                terms_t, aux = losses_mod.compute_loss_terms(
                    field, loss_batch, weights, stage, return_aux=True
                )
                if weights.lambda_surf > 0 and "render_depth" in aux:
                    # Rendered surface points join the smoothness anchors.
                    surf_pts = (
                        loss_batch.render_origins
                        + aux["render_depth"].unsqueeze(1) * loss_batch.render_directions
                    ).clamp(-1.0, 1.0)
                    hit = aux["render_mass"] > 0.5
                    if bool(hit.any()):
                        gen2 = epoch_generator(cfg.seed, epoch, salt=2)
                        pts, offs = losses_mod.smoothness_pairs(
                            surf_pts[hit], weights.r_surf * data.gsd, gen2
                        )
                        if pts.numel():
                            extra = losses_mod.smoothness_from_pairs(field, pts, offs)
                            if "surf" in terms_t:
                                terms_t["surf"] = 0.5 * (terms_t["surf"] + extra)
                            else:
                                terms_t["surf"] = extra

            with _Timer(timings, "loss"):
                total = losses_mod.total_loss(terms_t, weights, stage)
                terms = {k: float(v.detach()) for k, v in terms_t.items()}
                terms["total"] = float(total.detach())
                for name, value in terms.items():
                    if not math.isfinite(value):
                        raise NumericFaultError(
                            f"non-finite loss term '{name}' at epoch {epoch} (terms: {terms})"
                        )

            with _Timer(timings, "gradient"):
                if total.requires_grad:
                    grad_list = torch.autograd.grad(
                        total, list(field.params.values()), allow_unused=True
                    )
                    grads = {
                        k: (torch.zeros_like(p) if g is None else g)
                        for (k, p), g in zip(field.params.items(), grad_list)
                    }
                else:
                    grads = field.zero_like_params()

            if cfg.audit_single_writer and field.param_checksum() != checksum_before:
                raise ValidationError(
                    f"parameters mutated outside adam_step at epoch {epoch}"
                )

            with _Timer(timings, "update"):
                adam_step(field.params, grads, adam, lr, hyper, diagnostics=terms)

            wall_ms = (time.perf_counter() - t_epoch) * 1000.0
            row = format_log_row(epoch, stage, lr, terms, wall_ms)
            log_rows.append(row)
            if log_file:
                log_file.write(row + "\n")
                log_file.flush()
            if progress_every and (epoch + 1) % progress_every == 0:
                print(f"[train] epoch {epoch + 1}/{end_epoch} total={terms['total']:.5f}")

            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                emit_checkpoint(epoch + 1)
        emit_checkpoint(end_epoch)
    finally:
        if log_file:
            log_file.close()

    report = profile(timings, epochs=end_epoch - start_epoch)
    return TrainResult(
        field=field, adam=adam, log_rows=log_rows, profile=report,
        norm=data.norm, data=data, cfg=cfg,
    )
