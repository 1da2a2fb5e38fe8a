"""Training loss terms and their weighted combination.

Five terms: photometric color error, eikonal regularization of the SDF
gradient, normal-consistency smoothness over a local neighborhood, and the
two tie-point terms (truncated SDF supervision inside a band around the
observed depth, free-space hinge before it).

Depth conventions: everything here works in ray-parameter units within the
normalized domain. The supervision target for a band sample at depth ``d_s``
is the along-ray signed distance ``d_obs - d_s``, which is unbiased on the
zero level set. The truncation radius ``tr`` and smoothness radius come in as
GSD multiples at the config level and are converted to normalized distances
by the caller.

All functions are pure over immutable field snapshots and safe to evaluate
concurrently on disjoint batches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .errors import ValidationError
from .field import SdfField

BALL_RESAMPLE_TRIES = 8


@dataclass(frozen=True)
class LossWeights:
    """Per-stage weighting; defaults follow the two-stage training recipe."""

    lambda_eik: float = 5e-4
    lambda_surf: float = 5e-3
    lambda_fs: float = 10.0
    lambda_tr: float = 60.0
    r_surf: float = 35.0  # smoothness neighborhood radius, GSD multiples
    tr: float = 30.0  # truncation band half-width, GSD multiples

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_surf, self.lambda_fs, self.lambda_tr) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.tr <= 0:
            raise ValidationError("truncation radius must be positive")

    @staticmethod
    def stage_defaults(stage: int) -> "LossWeights":
        if stage == 1:
            return LossWeights(lambda_eik=0.0, lambda_surf=1e-2)
        if stage == 2:
            return LossWeights(lambda_eik=5e-4, lambda_surf=5e-3)
        raise ValidationError(f"unknown training stage {stage}")

    def with_overrides(self, **kwargs) -> "LossWeights":
        return replace(self, **kwargs)


@dataclass
class DepthSupervisionSamples:
    """Batched band / free-space samples along tie-point rays.

    Depths are ray parameters. ``t_tr`` lies within ``|d_obs - t| < tr_dist``
    (clipped to the ray's domain span) and carries
    ``target_sdf = d_obs - t``; ``t_fs`` lies in front of the band; rays
    whose free-space span is empty are masked out via ``fs_valid``.
    """

    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3)
    d_obs: torch.Tensor  # (R,)
    tr_dist: float  # band half-width in normalized units
    t_tr: torch.Tensor  # (R, M_tr)
    target_sdf: torch.Tensor  # (R, M_tr)
    t_fs: torch.Tensor  # (R, M_fs)
    fs_valid: torch.Tensor  # (R,) bool

    def __len__(self):
        return self.origins.shape[0]

    def band_positions(self) -> torch.Tensor:
        pos = self.origins.unsqueeze(1) + self.t_tr.unsqueeze(2) * self.directions.unsqueeze(1)
        return pos.reshape(-1, 3)

    def freespace_positions(self) -> torch.Tensor:
        pos = self.origins.unsqueeze(1) + self.t_fs.unsqueeze(2) * self.directions.unsqueeze(1)
        return pos.reshape(-1, 3)


@dataclass
class LossBatch:
    """Everything one optimization step evaluates, with positions fixed.

    Built by the trainer's batch assembly; passing it through
    :func:`sdfrecon.field.evaluate_with_gradients` is deterministic.
    """

    render_origins: torch.Tensor | None = None  # (R, 3)
    render_directions: torch.Tensor | None = None  # (R, 3)
    render_t: torch.Tensor | None = None  # (R, S)
    target_rgb: torch.Tensor | None = None  # (R, 3)
    eik_points: torch.Tensor | None = None  # (K, 3)
    smooth_points: torch.Tensor | None = None  # (M, 3)
    smooth_offsets: torch.Tensor | None = None  # (M, 3)
    depth: DepthSupervisionSamples | None = None

    @property
    def has_render(self) -> bool:
        return self.render_t is not None and self.render_t.numel() > 0


def _stratified_in(lo: torch.Tensor, hi: torch.Tensor, m: int, gen: torch.Generator | None):
    r = lo.shape[0]
    if gen is None:
        jitter = torch.full((r, m), 0.5, dtype=lo.dtype)
    else:
        jitter = torch.rand((r, m), generator=gen, dtype=lo.dtype)
    u = (torch.arange(m, dtype=lo.dtype) + jitter) / m
    return lo.unsqueeze(1) + (hi - lo).unsqueeze(1) * u


def build_depth_samples(
    origins: torch.Tensor,
    directions: torch.Tensor,
    d_obs: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    tr: float,
    m_tr: int,
    m_fs: int,
    gen: torch.Generator | None,
) -> DepthSupervisionSamples:
    """Stratified band and free-space depths for a batch of supervised rays.

    The band is ``[d_obs - tr, d_obs + tr]`` clipped to the ray's domain span
    (a ray observed closer than ``tr`` gets a band truncated at the near
    bound); free space is ``[t_near, d_obs - tr)`` and may be empty. Each
    stratum receives exactly one sample.
    """
    if tr <= 0:
        raise ValidationError("tr must be positive")
    band_lo = torch.maximum(d_obs - tr, t_near)
    band_hi = torch.minimum(d_obs + tr, t_far)
    band_hi = torch.maximum(band_hi, band_lo + 1e-9)
    t_tr = _stratified_in(band_lo, band_hi, m_tr, gen)
    target = d_obs.unsqueeze(1) - t_tr

    fs_hi = d_obs - tr
    fs_valid = fs_hi > t_near
    fs_hi_safe = torch.maximum(fs_hi, t_near + 1e-9)
    t_fs = _stratified_in(t_near, fs_hi_safe, m_fs, gen)
    return DepthSupervisionSamples(
        origins=origins,
        directions=directions,
        d_obs=d_obs,
        tr_dist=float(tr),
        t_tr=t_tr,
        target_sdf=target,
        t_fs=t_fs,
        fs_valid=fs_valid,
    )


# ---------------------------------------------------------------------------
# Individual terms
# ---------------------------------------------------------------------------


def rgb_loss(pred: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared Euclidean color error."""
    if pred.shape != obs.shape:
        raise ValidationError(f"color batch shapes differ: {pred.shape} vs {obs.shape}")
    if pred.numel() == 0:
        raise ValidationError("empty color batch")
    return (pred - obs).square().sum(dim=-1).mean()


def eikonal_loss(normals: torch.Tensor) -> torch.Tensor:
    """Mean of (||grad d|| - 1)^2 over a batch of SDF gradients."""
    if normals.numel() == 0:
        raise ValidationError("empty gradient batch")
    return (normals.norm(dim=-1) - 1.0).square().mean()


def sample_ball_offsets(
    n: int, radius: float, gen: torch.Generator | None, dtype=torch.float32
) -> torch.Tensor:
    """Uniform samples in the ball of the given radius."""
    d = torch.randn((n, 3), generator=gen, dtype=dtype)
    d = d / d.norm(dim=1, keepdim=True).clamp_min(1e-12)
    u = torch.rand((n, 1), generator=gen, dtype=dtype)
    return d * radius * u.pow(1.0 / 3.0)


def smoothness_pairs(
    points: torch.Tensor, radius: float, gen: torch.Generator | None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pair each point with a displaced neighbor that stays in the domain.

    Displacements leaving the domain are redrawn up to 8 times; stubborn
    points are dropped.
    """
    offsets = sample_ball_offsets(points.shape[0], radius, gen, points.dtype)
    for _ in range(BALL_RESAMPLE_TRIES):
        bad = (points + offsets).abs().amax(dim=1) > 1.0
        if not bool(bad.any()):
            break
        offsets[bad] = sample_ball_offsets(int(bad.sum()), radius, gen, points.dtype)
    keep = (points + offsets).abs().amax(dim=1) <= 1.0
    return points[keep], offsets[keep]


def smoothness_from_pairs(
    field: SdfField, points: torch.Tensor, offsets: torch.Tensor
) -> torch.Tensor:
    """Mean gradient difference ||n(x) - n(x + dx)||_2 over fixed pairs."""
    if points.numel() == 0:
        return torch.zeros((), dtype=field.dtype)
    both = torch.cat([points, points + offsets], dim=0)
    n = field.normal(both)
    n0, n1 = n[: points.shape[0]], n[points.shape[0] :]
    return (n0 - n1).norm(dim=-1).mean()


def smoothness_loss(
    field: SdfField,
    surface_points: torch.Tensor,
    r_surf: float,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Normal-consistency loss with neighbors drawn in a ball of radius r_surf."""
    pts, offs = smoothness_pairs(surface_points, r_surf, gen)
    return smoothness_from_pairs(field, pts, offs)


def truncation_loss(field: SdfField, samples: DepthSupervisionSamples) -> torch.Tensor:
    """Mean over rays of mean squared (target - predicted sdf) inside the band."""
    if len(samples) == 0:
        raise ValidationError("empty depth-supervision batch")
    pred = field.eval_sdf_only(samples.band_positions()).reshape(samples.t_tr.shape)
    return (samples.target_sdf - pred).square().mean(dim=1).mean()


def freespace_loss(field: SdfField, samples: DepthSupervisionSamples) -> torch.Tensor:
    """Squared hinge keeping free-space SDF above the truncation distance.

    Per-ray mean of ``relu(tr - sdf)^2`` over the free-space samples,
    averaged over all rays; rays with no free-space span contribute 0.
    """
    if len(samples) == 0:
        raise ValidationError("empty depth-supervision batch")
    if not bool(samples.fs_valid.any()):
        return torch.zeros((), dtype=samples.t_fs.dtype)
    pred = field.eval_sdf_only(samples.freespace_positions()).reshape(samples.t_fs.shape)
    hinge = torch.relu(samples.tr_dist - pred).square().mean(dim=1)
    hinge = hinge * samples.fs_valid.to(hinge.dtype)
    return hinge.sum() / len(samples)


def compute_loss_terms(
    field: SdfField, batch: LossBatch, weights: LossWeights, stage: int,
    return_aux: bool = False,
):
    """Evaluate the active terms for a prepared batch.

    Terms whose weight is zero (and the photometric term outside stage 2)
    are skipped entirely. With ``return_aux`` the detached render outputs
    (expected depth, opacity mass) come back too, so callers can derive
    surface points without rendering twice.
    """
    from . import renderer

    if stage not in (1, 2):
        raise ValidationError(f"unknown training stage {stage}")
    terms: dict[str, torch.Tensor] = {}
    aux: dict[str, torch.Tensor] = {}
    if stage == 2 and batch.has_render:
        out = renderer.render_rays(
            field, batch.render_origins, batch.render_directions, batch.render_t, with_grad=True
        )
        terms["rgb"] = rgb_loss(out["color"], batch.target_rgb)
        aux["render_depth"] = out["depth"].detach()
        aux["render_mass"] = out["opacity_mass"].detach()
    if weights.lambda_eik > 0 and batch.eik_points is not None and batch.eik_points.numel():
        terms["eik"] = eikonal_loss(field.normal(batch.eik_points))
    if weights.lambda_surf > 0 and batch.smooth_points is not None and batch.smooth_points.numel():
        terms["surf"] = smoothness_from_pairs(field, batch.smooth_points, batch.smooth_offsets)
    if batch.depth is not None and len(batch.depth):
        if weights.lambda_tr > 0:
            terms["tr"] = truncation_loss(field, batch.depth)
        if weights.lambda_fs > 0:
            terms["fs"] = freespace_loss(field, batch.depth)
    if return_aux:
        return terms, aux
    return terms


def total_loss(terms: dict, weights: LossWeights, stage: int) -> torch.Tensor:
    """Weighted sum of available terms; the photometric term is stage-2 only."""
    if stage not in (1, 2):
        raise ValidationError(f"unknown training stage {stage}")
    total = None

    def add(acc, value, w):
        if value is None or w == 0:
            return acc
        contrib = value * w
        return contrib if acc is None else acc + contrib

    if stage == 2:
        total = add(total, terms.get("rgb"), 1.0)
    total = add(total, terms.get("eik"), weights.lambda_eik)
    total = add(total, terms.get("surf"), weights.lambda_surf)
    total = add(total, terms.get("fs"), weights.lambda_fs)
    total = add(total, terms.get("tr"), weights.lambda_tr)
    return torch.zeros(()) if total is None else total
