"""Ray sampling and volume-rendering quadrature.

The sampler is the training hot path. Per ray it:

1. probes with ``n_probe`` stratified-uniform samples,
2. runs up to ``max_refinement_rounds - 1`` refinement rounds, each splitting
   the intervals with the largest opacity-approximation error bound
   ``|delta sigma| * delta^2 / 2`` at their midpoints, stopping early once the
   per-ray summed bound drops below ``error_tolerance``,
3. draws ``n_importance`` samples by inverse-transform sampling of the
   discrete weight CDF built from the refined probe,
4. unions them with ``n_uniform`` fresh stratified-uniform samples so rays
   can escape a wrong density state.

Rays whose probed density is identically zero fall back to a pure
stratified-uniform placement of all final samples. Field evaluations per ray
never exceed ``max_refinement_rounds * n_probe``.

Compositing follows the discrete quadrature: opacity
``o_i = 1 - exp(-sigma_i delta_i)``, transmittance
``T_i = exp(-sum_{j<i} sigma_j delta_j)``, pixel color ``sum T_i o_i c_i``.
All functions are pure over immutable field snapshots; disjoint ray batches
may be processed concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import scene as scene_mod
from .errors import ValidationError
from .field import SdfField, sdf_to_density

DEPTH_EPS = 1e-10
DEGENERATE_WEIGHT_SUM = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    n_probe: int = 128
    max_refinement_rounds: int = 4
    refine_per_round: int = 128
    error_tolerance: float = 0.01
    n_importance: int = 48
    n_uniform: int = 16

    def __post_init__(self):
        if self.n_probe < 2 or self.n_importance < 1 or self.n_uniform < 1:
            raise ValidationError("sampler sizes too small")
        if self.max_refinement_rounds < 1:
            raise ValidationError("max_refinement_rounds must be >= 1")
        if self.n_probe + (self.max_refinement_rounds - 1) * self.refine_per_round > (
            self.max_refinement_rounds * self.n_probe
        ):
            raise ValidationError("refine_per_round exceeds the per-ray evaluation budget")

    @property
    def n_final(self) -> int:
        return self.n_importance + self.n_uniform

    @property
    def eval_budget(self) -> int:
        return self.max_refinement_rounds * self.n_probe


@dataclass
class RaySampleSet:
    """Ordered samples along one ray with field outputs."""

    ray: scene_mod.Ray
    t: torch.Tensor  # (N,)
    delta: torch.Tensor  # (N,) terminal delta repeats the last gap
    positions: torch.Tensor  # (N, 3)
    sdf: torch.Tensor  # (N,)
    density: torch.Tensor  # (N,)
    n_evals: int = 0

    def __post_init__(self):
        t = self.t
        if len(t) == 0:
            raise ValidationError("empty sample set")
        if len(t) > 1 and not bool((t[1:] > t[:-1]).all()):
            raise ValidationError("sample depths must be strictly increasing")
        if not (self.ray.t_near <= float(t[0]) and float(t[-1]) <= self.ray.t_far + 1e-9):
            raise ValidationError("samples outside ray bounds")


@dataclass
class RenderResult:
    color: torch.Tensor  # (3,)
    depth: torch.Tensor  # scalar, expected termination depth (ray parameter)
    opacity_mass: torch.Tensor  # scalar in [0, 1]
    transmittance: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N,) T_i * o_i


def stratified_samples(t_near, t_far, n: int, gen: torch.Generator | None, dtype=torch.float32):
    """(R, n) stratified-uniform depths; midpoints when ``gen`` is None."""
    t_near = torch.as_tensor(t_near, dtype=dtype).reshape(-1, 1)
    t_far = torch.as_tensor(t_far, dtype=dtype).reshape(-1, 1)
    r = t_near.shape[0]
    if gen is None:
        jitter = torch.full((r, n), 0.5, dtype=dtype)
    else:
        jitter = torch.rand((r, n), generator=gen, dtype=dtype)
    u = (torch.arange(n, dtype=dtype) + jitter) / n
    return t_near + (t_far - t_near) * u


def _invert_cdf(bins: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-transform sampling. bins (R, N), weights (R, N-1), u (R, M) in [0,1)."""
    pdf = weights / weights.sum(dim=1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=1)], dim=1)
    cdf[:, -1] = 1.0  # close the CDF against rounding
    idx = torch.searchsorted(cdf, u.contiguous(), right=True).clamp(1, cdf.shape[1] - 1) - 1
    c0 = torch.gather(cdf, 1, idx)
    c1 = torch.gather(cdf, 1, idx + 1)
    b0 = torch.gather(bins, 1, idx)
    b1 = torch.gather(bins, 1, idx + 1)
    denom = (c1 - c0).clamp_min(1e-12)
    frac = ((u - c0) / denom).clamp(0.0, 1.0)
    return b0 + frac * (b1 - b0)


def weight_cdf(sigma: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Normalized discrete CDF of the opacity weights over sample intervals."""
    delta = t[:, 1:] - t[:, :-1]
    tau = sigma[:, :-1] * delta
    o = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], 1), 1))
    w = (trans * o).clamp_min(0)
    total = w.sum(dim=1, keepdim=True).clamp_min(DEGENERATE_WEIGHT_SUM)
    cdf = torch.cumsum(w / total, dim=1)
    return torch.cat([torch.zeros_like(cdf[:, :1]), cdf], dim=1)


def sample_rays(
    field: SdfField,
    origins: torch.Tensor,
    directions: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    beta: float | None = None,
    cfg: SamplerConfig | None = None,
    gen: torch.Generator | None = None,
):
    """Batched sampler. Returns (t (R, N_final), n_evals_per_ray: int).

    Runs entirely without autograd; sample placement is treated as data.
    """
    cfg = cfg or SamplerConfig()
    dtype = origins.dtype
    with torch.no_grad():
        beta_t = float(field.beta) if beta is None else float(beta)

        def sigma_at(tv: torch.Tensor) -> torch.Tensor:
            pts = origins.unsqueeze(1) + tv.unsqueeze(2) * directions.unsqueeze(1)
            sdf = field.eval_sdf_only(pts.reshape(-1, 3)).reshape(tv.shape)
            return sdf_to_density(sdf, torch.as_tensor(beta_t, dtype=dtype))

        t = stratified_samples(t_near, t_far, cfg.n_probe, gen, dtype)
        sigma = sigma_at(t)
        n_evals = cfg.n_probe

        for _ in range(cfg.max_refinement_rounds - 1):
            delta = t[:, 1:] - t[:, :-1]
            bound = (sigma[:, 1:] - sigma[:, :-1]).abs() * delta.square() * 0.5
            if float(bound.sum(dim=1).max()) < cfg.error_tolerance:
                break
            k = min(cfg.refine_per_round, bound.shape[1])
            _, top = torch.topk(bound, k, dim=1)
            mid = 0.5 * (torch.gather(t, 1, top) + torch.gather(t, 1, top + 1))
            sigma_mid = sigma_at(mid)
            n_evals += k
            t, order = torch.sort(torch.cat([t, mid], dim=1), dim=1)
            sigma = torch.gather(torch.cat([sigma, sigma_mid], dim=1), 1, order)

        delta = t[:, 1:] - t[:, :-1]
        tau = sigma[:, :-1] * delta
        o = 1.0 - torch.exp(-tau)
        trans = torch.exp(
            -torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], 1), 1)
        )
        w = (trans * o).clamp_min(0)
        degenerate = w.sum(dim=1) < DEGENERATE_WEIGHT_SUM

        if gen is None:
            u = (torch.arange(cfg.n_importance, dtype=dtype) + 0.5) / cfg.n_importance
            u = u.expand(t.shape[0], -1).clone()
        else:
            jitter = torch.rand((t.shape[0], cfg.n_importance), generator=gen, dtype=dtype)
            u = (torch.arange(cfg.n_importance, dtype=dtype) + jitter) / cfg.n_importance
        safe_w = torch.where(degenerate.unsqueeze(1), torch.ones_like(w), w + 1e-12)
        t_imp = _invert_cdf(t, safe_w, u)

        t_uni = stratified_samples(t_near, t_far, cfg.n_uniform, gen, dtype)
        t_all, _ = torch.sort(torch.cat([t_imp, t_uni], dim=1), dim=1)

        t_fallback = stratified_samples(t_near, t_far, cfg.n_final, gen, dtype)
        t_all = torch.where(degenerate.unsqueeze(1), t_fallback, t_all)
        # Nudge coincident depths apart (measure-zero duplicate protection).
        t_all[:, 1:] = torch.maximum(t_all[:, 1:], t_all[:, :-1] + 1e-9)
    return t_all, n_evals


def deltas_for(t: torch.Tensor) -> torch.Tensor:
    """Per-sample spacings; the terminal spacing repeats the last gap."""
    gaps = t[..., 1:] - t[..., :-1]
    return torch.cat([gaps, gaps[..., -1:]], dim=-1)


def composite(sigma: torch.Tensor, colors: torch.Tensor, delta: torch.Tensor, t: torch.Tensor):
    """Discrete volume rendering over (..., N) samples.

    Returns (color (..., 3), depth (...,), opacity_mass (...,),
    transmittance (..., N), weights (..., N)).
    """
    tau = sigma * delta
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1))
    opacity = 1.0 - torch.exp(-tau)
    weights = trans * opacity
    color = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    # The exact weight sum is 1 - T_final <= 1; clamp away summation rounding.
    mass = weights.sum(dim=-1).clamp(max=1.0)
    depth = (weights * t).sum(dim=-1) / mass.clamp_min(DEPTH_EPS)
    return color, depth, mass, trans, weights


def render_rays(
    field: SdfField,
    origins: torch.Tensor,
    directions: torch.Tensor,
    t: torch.Tensor,
    with_grad: bool = False,
):
    """Evaluate the field along (R, N) fixed sample depths and composite.

    Returns a dict with color/depth/mass/weights plus the per-sample
    positions and sdf values (reused by the loss terms).
    """
    ctx = torch.enable_grad() if with_grad else torch.no_grad()
    with ctx:
        r, n = t.shape
        pts = (origins.unsqueeze(1) + t.unsqueeze(2) * directions.unsqueeze(1)).reshape(-1, 3)
        sdf, feat = field.eval_sdf(pts)
        sigma = field.density(sdf).reshape(r, n)
        normals = field.normal(pts) if field.config.app_use_normal else None
        view = directions.unsqueeze(1).expand(r, n, 3).reshape(-1, 3)
        rgb = field.eval_color(pts, view, normals, feat).reshape(r, n, 3)
        delta = deltas_for(t)
        color, depth, mass, trans, weights = composite(sigma, rgb, delta, t)
    return {
        "color": color,
        "depth": depth,
        "opacity_mass": mass,
        "transmittance": trans,
        "weights": weights,
        "positions": pts.reshape(r, n, 3),
        "sdf": sdf.reshape(r, n),
    }


def sample_ray(
    field: SdfField,
    ray: scene_mod.Ray,
    beta: float | None = None,
    cfg: SamplerConfig | None = None,
    gen: torch.Generator | None = None,
) -> RaySampleSet:
    """Single-ray sampler; see :func:`sample_rays` for the algorithm."""
    dtype = field.dtype
    origin = torch.as_tensor(ray.origin, dtype=dtype).unsqueeze(0)
    direction = torch.as_tensor(ray.direction, dtype=dtype).unsqueeze(0)
    t, n_evals = sample_rays(
        field,
        origin,
        direction,
        torch.tensor([ray.t_near], dtype=dtype),
        torch.tensor([ray.t_far], dtype=dtype),
        beta,
        cfg,
        gen,
    )
    t = t[0]
    positions = origin + t.unsqueeze(1) * direction
    with torch.no_grad():
        sdf = field.eval_sdf_only(positions)
        density = sdf_to_density(sdf, torch.as_tensor(float(field.beta) if beta is None else beta, dtype=dtype))
    return RaySampleSet(
        ray=ray,
        t=t,
        delta=deltas_for(t),
        positions=positions,
        sdf=sdf,
        density=density,
        n_evals=n_evals,
    )


def render_ray(field: SdfField, samples: RaySampleSet) -> RenderResult:
    """Composite one sampled ray into color/depth/transmittance."""
    with torch.no_grad():
        n = samples.t.shape[0]
        direction = torch.as_tensor(samples.ray.direction, dtype=field.dtype)
        view = direction.unsqueeze(0).expand(n, 3)
        _, feat = field.eval_sdf(samples.positions)
        normals = field.normal(samples.positions) if field.config.app_use_normal else None
        rgb = field.eval_color(samples.positions, view, normals, feat)
        color, depth, mass, trans, weights = composite(
            samples.density.unsqueeze(0),
            rgb.unsqueeze(0),
            samples.delta.unsqueeze(0),
            samples.t.unsqueeze(0),
        )
    return RenderResult(
        color=color[0], depth=depth[0], opacity_mass=mass[0],
        transmittance=trans[0], weights=weights[0],
    )


def render_image(
    field: SdfField,
    view: scene_mod.CameraView,
    norm: scene_mod.SceneNormalization | None = None,
    stride: int = 1,
    cfg: SamplerConfig | None = None,
    chunk: int = 2048,
):
    """Render a full view with the deterministic (midpoint) sampler.

    Returns (rgb (h, w, 3), depth (h, w), alpha (h, w)) numpy arrays for the
    strided pixel grid. Depth is view-space z-depth in the camera's world
    units (-1 where nothing was hit); alpha is the accumulated opacity mass,
    0 for rays that miss the working domain entirely.
    """
    cfg = cfg or SamplerConfig()
    norm = norm or scene_mod.SceneNormalization.identity()
    us = np.arange(0, view.width, stride)
    vs = np.arange(0, view.height, stride)
    uu, vv = np.meshgrid(us, vs)
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, dirs, tn, tf, valid = scene_mod.camera_rays(view, pixels, norm)

    h, w = len(vs), len(us)
    rgb = np.zeros((h * w, 3), dtype=np.float32)
    depth = np.full(h * w, -1.0, dtype=np.float32)
    alpha = np.zeros(h * w, dtype=np.float32)

    axis = view.viewing_axis
    cos = (dirs @ axis).astype(np.float64)
    idx_valid = np.flatnonzero(valid)
    dtype = field.dtype
    for start in range(0, len(idx_valid), chunk):
        sel = idx_valid[start : start + chunk]
        o = torch.as_tensor(origins[sel], dtype=dtype)
        d = torch.as_tensor(dirs[sel], dtype=dtype)
        t, _ = sample_rays(field, o, d, torch.as_tensor(tn[sel], dtype=dtype),
                           torch.as_tensor(tf[sel], dtype=dtype), None, cfg, None)
        out = render_rays(field, o, d, t, with_grad=False)
        rgb[sel] = out["color"].numpy()
        alpha[sel] = out["opacity_mass"].numpy()
        # Ray-parameter depth (normalized units) -> world z-depth.
        depth[sel] = (out["depth"].numpy() * cos[sel] / norm.scale).astype(np.float32)
    miss = alpha <= 1e-4
    depth[miss] = -1.0
    return rgb.reshape(h, w, 3), depth.reshape(h, w), alpha.reshape(h, w)
