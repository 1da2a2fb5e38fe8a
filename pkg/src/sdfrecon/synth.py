"""Synthetic ground-truth scenes: analytic SDFs, camera rigs, tie points.

Everything the reconstruction pipeline consumes can be generated here with
known geometry: closed-form signed distances (sphere / box / plane composed
by min-union), sphere-traced depth and Lambertian-shaded images, regular
camera rigs, and tie points with controllable pixel noise and outliers. The
module writes the exact file formats the scene module loads.

World units are arbitrary (think meters); images are rendered in world
coordinates, before any domain normalization.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from . import fileio, scene as scene_mod
from .errors import ValidationError

TRACE_TOL = 1e-9
TRACE_MAX_STEPS = 512
OUTLIER_RANGE_GSD = 50.0


@dataclass(frozen=True)
class Primitive:
    """One analytic solid: 'sphere', 'box', or 'plane' (halfspace z <= z0)."""

    shape: str
    center: np.ndarray  # sphere/box center; for plane only z is used
    size: np.ndarray  # sphere: (r,); box: half extents (3,); plane: unused
    albedo: np.ndarray  # rgb in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", np.atleast_1d(np.asarray(self.size, dtype=np.float64)))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        if self.shape not in ("sphere", "box", "plane"):
            raise ValidationError(f"unknown primitive shape {self.shape!r}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.shape == "sphere":
            return np.linalg.norm(x - self.center, axis=1) - self.size[0]
        if self.shape == "box":
            q = np.abs(x - self.center) - self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        return x[:, 2] - self.center[2]  # plane

    def top_height(self, xy: np.ndarray) -> np.ndarray:
        """Highest surface z over (N, 2) ground positions; -inf where absent."""
        xy = np.atleast_2d(xy)
        if self.shape == "sphere":
            rho2 = ((xy - self.center[:2]) ** 2).sum(axis=1)
            r2 = self.size[0] ** 2
            out = np.full(len(xy), -np.inf)
            hit = rho2 <= r2
            out[hit] = self.center[2] + np.sqrt(r2 - rho2[hit])
            return out
        if self.shape == "box":
            inside = (np.abs(xy - self.center[:2]) <= self.size[:2]).all(axis=1)
            return np.where(inside, self.center[2] + self.size[2], -np.inf)
        return np.full(len(xy), self.center[2])  # plane

    def surface_area(self, aoi) -> float:
        if self.shape == "sphere":
            return 4.0 * math.pi * self.size[0] ** 2
        if self.shape == "box":
            a, b, c = 2.0 * self.size
            return 2.0 * (a * b + b * c + a * c)
        return (aoi[1] - aoi[0]) * (aoi[3] - aoi[2])  # plane clipped to the AOI

    def sample_surface(self, n: int, rng: np.random.Generator, aoi) -> np.ndarray:
        if self.shape == "sphere":
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return self.center + self.size[0] * v
        if self.shape == "box":
            areas = np.array(
                [self.size[1] * self.size[2], self.size[0] * self.size[2], self.size[0] * self.size[1]]
            )
            axis = rng.choice(3, size=n, p=areas / areas.sum())
            sign = rng.choice([-1.0, 1.0], size=n)
            pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * self.size
            pts[np.arange(n), axis] = sign * self.size[axis]
            return self.center + pts
        xs = rng.uniform(aoi[0], aoi[1], size=n)
        ys = rng.uniform(aoi[2], aoi[3], size=n)
        return np.stack([xs, ys, np.full(n, self.center[2])], axis=1)


@dataclass
class AnalyticScene:
    """Min-union of primitives with one directional light."""

    primitives: list[Primitive]
    light: np.ndarray = dc_field(default_factory=lambda: np.array([0.35, 0.25, -1.0]))
    ambient: float = 0.25
    aoi: tuple = (-1.6, 1.6, -1.6, 1.6)  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("scene needs at least one primitive")
        self.light = np.asarray(self.light, dtype=np.float64)
        self.light = self.light / np.linalg.norm(self.light)


def analytic_sdf(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Signed distance of the min-union (negative inside), vectorized over (N, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.min(np.stack([p.sdf(x) for p in scene.primitives], axis=0), axis=0)


def analytic_normal(scene: AnalyticScene, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference surface normal of the analytic SDF."""
    x = np.atleast_2d(x)
    grad = np.empty_like(x)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        grad[:, a] = (analytic_sdf(scene, x + e) - analytic_sdf(scene, x - e)) / (2 * h)
    return grad


def nearest_primitive(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    d = np.stack([p.sdf(x) for p in scene.primitives], axis=0)
    return d.argmin(axis=0)


def albedo_at(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    idx = nearest_primitive(scene, x)
    table = np.stack([p.albedo for p in scene.primitives], axis=0)
    return table[idx]


def sphere_trace(
    scene: AnalyticScene,
    origins: np.ndarray,
    directions: np.ndarray,
    t_start: float = 1e-6,
    t_max: float = 100.0,
):
    """First zero crossing of the analytic SDF along each ray.

    Returns (t (N,), hit (N,) bool). Conservative marching: the min-union SDF
    is a lower bound of the distance to the union surface.
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = len(directions)
    if len(origins) == 1:
        origins = np.broadcast_to(origins, (n, 3))
    t = np.full(n, t_start, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        pts = origins[active] + t[active, None] * directions[active]
        d = analytic_sdf(scene, pts)
        newly_hit = d < TRACE_TOL
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        over = t[idx] > t_max
        active[idx[newly_hit | over]] = False
        if not active.any():
            break
    return t, hit


def render_ground_truth(
    scene: AnalyticScene, view: scene_mod.CameraView, light: np.ndarray | None = None
):
    """Sphere-traced image and z-depth map for one view.

    Lambertian shading with an ambient floor; background is black with depth
    sentinel -1. The world is clipped to the scene AOI: surface hits outside
    it render as background, so images never show content the reconstruction
    domain cannot contain (the renderer composites escaped rays against
    black, and training data must be consistent with that). An explicit
    ``light`` overrides the scene light (used by the moving-shadows stimulus
    where each view gets its own light).
    """
    w, h = view.width, view.height
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    dirs = scene_mod.pixel_directions(view, pixels)
    t, hit = sphere_trace(scene, view.center[None, :], dirs)
    if hit.any():
        pts_all = view.center + t[:, None] * dirs
        inside = (
            (pts_all[:, 0] >= scene.aoi[0])
            & (pts_all[:, 0] <= scene.aoi[1])
            & (pts_all[:, 1] >= scene.aoi[2])
            & (pts_all[:, 1] <= scene.aoi[3])
        )
        hit = hit & inside
    image = np.zeros((w * h, 3), dtype=np.float64)
    depth = np.full(w * h, fileio.DEPTH_NODATA, dtype=np.float64)
    if hit.any():
        pts = view.center + t[hit, None] * dirs[hit]
        normals = analytic_normal(scene, pts)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        l = scene.light if light is None else np.asarray(light) / np.linalg.norm(light)
        lambert = np.maximum(0.0, normals @ (-l))
        shade = scene.ambient + (1.0 - scene.ambient) * lambert
        image[hit] = albedo_at(scene, pts) * shade[:, None]
        cos = dirs[hit] @ view.viewing_axis
        depth[hit] = t[hit] * cos
    return image.reshape(h, w, 3), depth.reshape(h, w)


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigSpec:
    pattern: str = "nadir-grid"
    count: int = 16
    altitude: float = 4.0
    tilt_deg: float = 0.0
    image_size: int = 96
    focal: float = 104.0
    spread: float = 0.9  # grid half-extent / unused for rings

    def __post_init__(self):
        if self.pattern not in ("nadir-grid", "oblique-ring"):
            raise ValidationError(f"unknown rig pattern {self.pattern!r}")
        if self.count < 2:
            raise ValidationError("rig needs at least 2 cameras")
        if self.image_size < 32:
            raise ValidationError("image size must be at least 32")


NADIR_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def generate_rig(spec: RigSpec, scene: AnalyticScene) -> scene_mod.CameraSet:
    """Cameras per the rig pattern, all oriented at the scene."""
    gsd = spec.altitude / spec.focal
    pp = np.array([(spec.image_size - 1) / 2.0] * 2)
    views = []
    if spec.pattern == "nadir-grid":
        m = int(round(math.sqrt(spec.count)))
        if m * m != spec.count:
            raise ValidationError("nadir-grid needs a square camera count")
        coords = np.linspace(-spec.spread, spec.spread, m) if m > 1 else np.zeros(1)
        cid = 0
        for y in coords:
            for x in coords:
                views.append(
                    scene_mod.CameraView(
                        id=cid,
                        width=spec.image_size,
                        height=spec.image_size,
                        focal=spec.focal,
                        principal_point=pp,
                        rotation=NADIR_ROTATION,
                        center=np.array([x, y, spec.altitude]),
                        gsd=gsd,
                    )
                )
                cid += 1
    else:  # oblique-ring
        tilt = math.radians(spec.tilt_deg)
        radius = spec.altitude * math.tan(tilt)
        target = np.array([0.0, 0.0, 0.0])
        for cid in range(spec.count):
            phi = 2.0 * math.pi * cid / spec.count
            center = np.array(
                [radius * math.cos(phi), radius * math.sin(phi), spec.altitude]
            )
            z = target - center
            z /= np.linalg.norm(z)
            right = np.cross(z, np.array([0.0, 0.0, 1.0]))
            if np.linalg.norm(right) < 1e-9:
                right = np.array([1.0, 0.0, 0.0])
            right /= np.linalg.norm(right)
            down = np.cross(z, right)
            views.append(
                scene_mod.CameraView(
                    id=cid,
                    width=spec.image_size,
                    height=spec.image_size,
                    focal=spec.focal,
                    principal_point=pp,
                    rotation=np.stack([right, down, z]),
                    center=center,
                    gsd=gsd,
                )
            )
    return scene_mod.CameraSet(views)


# ---------------------------------------------------------------------------
# Tie points
# ---------------------------------------------------------------------------


def _visible_observations(scene, cameras, point):
    """Project a surface point into every unoccluded view it falls inside."""
    obs = []
    for view in cameras:
        try:
            pixel, depth = scene_mod.project(view, point)
        except scene_mod.BehindCameraError:
            continue
        if not view.contains_pixel(pixel):
            continue
        ray_dir = point - view.center
        dist = np.linalg.norm(ray_dir)
        ray_dir = ray_dir / dist
        t_hit, hit = sphere_trace(scene, view.center[None, :], ray_dir[None, :])
        if hit[0] and t_hit[0] > dist - 1e-4:
            obs.append((view.id, pixel))
    return obs


def generate_tiepoints(
    scene: AnalyticScene,
    cameras: scene_mod.CameraSet,
    n: int,
    pixel_noise: float = 0.0,
    outlier_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> scene_mod.TiePointSet:
    """Surface points with projected observations, noise and outliers.

    Points are drawn area-weighted across primitives; observations are the
    projections into all views where the point is unoccluded (verified by
    sphere tracing), perturbed by Gaussian pixel noise. A fraction of points
    is displaced in 3D by up to 50 GSD (its observations then consistently
    reproject the displaced point). Points seen by fewer than two views are
    dropped.
    """
    if n < 1:
        raise ValidationError("need at least one tie point")
    if not (0 <= outlier_rate <= 1) or pixel_noise < 0:
        raise ValidationError("noise/outlier rates out of range")
    rng = rng or np.random.default_rng(0)
    gsd = next(iter(cameras)).gsd

    areas = np.array([p.surface_area(scene.aoi) for p in scene.primitives])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for prim, k in zip(scene.primitives, counts):
        if k:
            pts.append(prim.sample_surface(k, rng, scene.aoi))
    pts = np.vstack(pts)
    # Drop samples buried inside another primitive.
    pts = pts[analytic_sdf(scene, pts) > -1e-9]
    # Keep the ground AOI: sampling regions nobody images is pointless.
    inside = (
        (pts[:, 0] >= scene.aoi[0])
        & (pts[:, 0] <= scene.aoi[1])
        & (pts[:, 1] >= scene.aoi[2])
        & (pts[:, 1] <= scene.aoi[3])
    )
    pts = pts[inside]

    outlier = rng.random(len(pts)) < outlier_rate
    tiepoints = []
    for i, point in enumerate(pts):
        obs = _visible_observations(scene, cameras, point)
        if len(obs) < 2:
            continue
        stored = point
        if outlier[i]:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            stored = point + d * rng.uniform(0.0, OUTLIER_RANGE_GSD * gsd)
            moved = []
            for view_id, _ in obs:
                try:
                    pixel, _ = scene_mod.project(cameras[view_id], stored)
                except scene_mod.BehindCameraError:
                    continue
                if cameras[view_id].contains_pixel(pixel):
                    moved.append((view_id, pixel))
            obs = moved
            if len(obs) < 2:
                continue
        if pixel_noise > 0:
            noisy = []
            for view_id, pixel in obs:
                p = pixel + rng.normal(scale=pixel_noise, size=2)
                view = cameras[view_id]
                p = np.clip(p, -0.49, [view.width - 0.51, view.height - 0.51])
                noisy.append((view_id, p))
            obs = noisy
        tiepoints.append(scene_mod.TiePoint(point=stored, observations=obs))
    if not tiepoints:
        raise ValidationError("scene/camera setup produced no valid tie points")
    return scene_mod.TiePointSet(tiepoints)


# ---------------------------------------------------------------------------
# Ground-truth DSM and torch adapter
# ---------------------------------------------------------------------------


def analytic_dsm(scene: AnalyticScene, cell: float, aoi=None):
    """Upper-envelope heights on a regular grid; see surface.DsmRaster.

    Row 0 is the southernmost row (minimum y); heights are exact.
    """
    from .surface import DsmRaster

    aoi = aoi or scene.aoi
    nx = int(round((aoi[1] - aoi[0]) / cell))
    ny = int(round((aoi[3] - aoi[2]) / cell))
    xs = aoi[0] + (np.arange(nx) + 0.5) * cell
    ys = aoi[2] + (np.arange(ny) + 0.5) * cell
    xx, yy = np.meshgrid(xs, ys)
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
    heights = np.max(np.stack([p.top_height(xy) for p in scene.primitives], axis=0), axis=0)
    heights = heights.reshape(ny, nx)
    nodata = ~np.isfinite(heights)
    heights = np.where(nodata, DsmRaster.NODATA, heights)
    return DsmRaster(origin=np.array([aoi[0], aoi[2]]), cell=cell, heights=heights)


class AnalyticField:
    """Duck-typed field over an analytic scene, for oracle tests and renders.

    Quacks enough of :class:`sdfrecon.field.SdfField` for the renderer:
    ``eval_sdf_only`` / ``eval_sdf`` / ``density`` / ``normal`` /
    ``eval_color`` / ``beta`` / ``dtype`` / ``leaf`` / ``config``. Colors are
    the Lambert-shaded albedo so rendered images match the sphere-traced
    ground truth.
    """

    class _Cfg:
        app_use_normal = False

    def __init__(self, scene: AnalyticScene, beta: float = 1e-3, leaf: float = 0.01,
                 norm: scene_mod.SceneNormalization | None = None, shaded: bool = True):
        self.scene = scene
        self._beta = beta
        self.leaf = leaf
        self.dtype = torch.float64
        self.config = self._Cfg()
        self.norm = norm or scene_mod.SceneNormalization.identity()
        self.shaded = shaded

    @property
    def beta(self):
        return torch.tensor(self._beta, dtype=self.dtype)

    def _world(self, x: torch.Tensor) -> np.ndarray:
        return self.norm.invert(x.detach().cpu().numpy())

    def eval_sdf_only(self, x: torch.Tensor) -> torch.Tensor:
        d = analytic_sdf(self.scene, self._world(x)) * self.norm.scale
        return torch.as_tensor(d, dtype=self.dtype)

    def eval_sdf(self, x: torch.Tensor):
        sdf = self.eval_sdf_only(x)
        return sdf, torch.zeros((x.shape[0], 0), dtype=self.dtype)

    def density(self, sdf: torch.Tensor) -> torch.Tensor:
        from .field import sdf_to_density

        return sdf_to_density(sdf, self.beta)

    def normal(self, x: torch.Tensor, return_flags: bool = False):
        g = analytic_normal(self.scene, self._world(x))
        g = torch.as_tensor(g, dtype=self.dtype)
        if return_flags:
            return g, torch.zeros(x.shape[0], dtype=torch.bool)
        return g

    def eval_color(self, x, view_dir, normal, feature) -> torch.Tensor:
        pts = self._world(x)
        rgb = albedo_at(self.scene, pts)
        if self.shaded:
            n = analytic_normal(self.scene, pts)
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
            lambert = np.maximum(0.0, n @ (-self.scene.light))
            rgb = rgb * (self.scene.ambient + (1.0 - self.scene.ambient) * lambert)[:, None]
        return torch.as_tensor(rgb, dtype=self.dtype)


# ---------------------------------------------------------------------------
# Scene configs and dataset writing
# ---------------------------------------------------------------------------


def default_scene() -> AnalyticScene:
    """Flat ground with one sphere and one box: flat, curved and sharp geometry."""
    return AnalyticScene(
        primitives=[
            Primitive("plane", center=(0.0, 0.0, 0.0), size=(0.0,), albedo=(0.55, 0.55, 0.5)),
            Primitive("sphere", center=(-0.55, -0.4, 0.25), size=(0.25,), albedo=(0.8, 0.3, 0.25)),
            Primitive("box", center=(0.45, 0.35, 0.3), size=(0.3, 0.3, 0.3), albedo=(0.25, 0.4, 0.8)),
        ]
    )


def parse_scene_config(kv: dict[str, str]):
    """Build (AnalyticScene, RigSpec, tie-point settings) from key=value text.

    Unknown keys are rejected. See configs/ for a commented example.
    """
    known_scalar = {
        "scene.ambient", "scene.light", "scene.aoi", "scene.moving_shadows",
        "rig.pattern", "rig.count", "rig.altitude", "rig.tilt_deg",
        "rig.image_size", "rig.focal", "rig.spread",
        "tiepoints.count", "tiepoints.pixel_noise", "tiepoints.outlier_rate",
    }
    prims = []
    for key, value in kv.items():
        if key.startswith("primitive."):
            fields = value.split()
            shape = fields[0]
            vals = [float(v) for v in fields[1:]]
            if shape == "plane":
                if len(vals) != 4:
                    raise ValidationError(f"{key}: plane takes 'z r g b'")
                prims.append(Primitive("plane", (0, 0, vals[0]), (0.0,), vals[1:]))
            elif shape == "sphere":
                if len(vals) != 7:
                    raise ValidationError(f"{key}: sphere takes 'cx cy cz r  r g b'")
                prims.append(Primitive("sphere", vals[0:3], (vals[3],), vals[4:7]))
            elif shape == "box":
                if len(vals) != 9:
                    raise ValidationError(f"{key}: box takes 'cx cy cz hx hy hz r g b'")
                prims.append(Primitive("box", vals[0:3], vals[3:6], vals[6:9]))
            else:
                raise ValidationError(f"{key}: unknown primitive shape {shape!r}")
        elif key not in known_scalar:
            raise ValidationError(f"unknown scene config key {key!r}")

    base = default_scene()
    if prims:
        base = AnalyticScene(primitives=prims)
    if "scene.light" in kv:
        base.light = np.array([float(v) for v in kv["scene.light"].split()])
        base.light /= np.linalg.norm(base.light)
    if "scene.ambient" in kv:
        base.ambient = float(kv["scene.ambient"])
    if "scene.aoi" in kv:
        base.aoi = tuple(float(v) for v in kv["scene.aoi"].split())

    rig = RigSpec(
        pattern=kv.get("rig.pattern", "nadir-grid"),
        count=int(kv.get("rig.count", "16")),
        altitude=float(kv.get("rig.altitude", "4.0")),
        tilt_deg=float(kv.get("rig.tilt_deg", "0.0")),
        image_size=int(kv.get("rig.image_size", "96")),
        focal=float(kv.get("rig.focal", "104.0")),
        spread=float(kv.get("rig.spread", "0.9")),
    )
    tp = {
        "count": int(kv.get("tiepoints.count", "2000")),
        "pixel_noise": float(kv.get("tiepoints.pixel_noise", "0.3")),
        "outlier_rate": float(kv.get("tiepoints.outlier_rate", "0.0")),
    }
    moving_shadows = kv.get("scene.moving_shadows", "false").lower() in ("1", "true", "yes")
    return base, rig, tp, moving_shadows


def write_dataset(
    out_dir,
    scene: AnalyticScene,
    rig: RigSpec,
    tp_spec: dict,
    seed: int = 0,
    moving_shadows: bool = False,
) -> dict:
    """Render and write a complete dataset directory.

    Layout: cameras.txt, tiepoints.txt, meta.txt, images/<id>.ppm,
    gt/dsm.asc (analytic upper envelope at one-GSD cells over the AOI) and
    gt/depth_<id>.bin. Fully deterministic for a given seed.
    """
    from . import surface as surface_mod

    rng = np.random.default_rng(seed)
    cameras = generate_rig(rig, scene)
    if tp_spec["count"] < 1:
        raise ValidationError("n_tiepoints must be >= 1 (stage 1 needs tie points)")
    tiepoints = generate_tiepoints(
        scene, cameras, tp_spec["count"], tp_spec["pixel_noise"], tp_spec["outlier_rate"], rng
    )

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    scene_mod.save_cameras(os.path.join(out_dir, "cameras.txt"), cameras)
    scene_mod.save_tiepoints(os.path.join(out_dir, "tiepoints.txt"), tiepoints)

    gsd = next(iter(cameras)).gsd
    for view in cameras:
        light = None
        if moving_shadows:
            jitter = np.random.default_rng(seed * 7919 + view.id).normal(scale=0.25, size=3)
            light = scene.light + jitter * np.array([1.0, 1.0, 0.0])
        image, depth = render_ground_truth(scene, view, light=light)
        fileio.write_ppm(os.path.join(out_dir, "images", f"{view.id:04d}.ppm"), image)
        fileio.write_depth_grid(
            os.path.join(out_dir, "gt", f"depth_{view.id:04d}.bin"), depth.astype(np.float32)
        )

    dsm = analytic_dsm(scene, cell=gsd)
    surface_mod.save_dsm(os.path.join(out_dir, "gt", "dsm.asc"), dsm)

    meta = {
        "gsd": fileio.format_float(gsd),
        "n_cameras": len(cameras),
        "n_tiepoints": len(tiepoints),
        "aoi": " ".join(fileio.format_float(v) for v in scene.aoi),
        "seed": seed,
    }
    fileio.write_kv_file(os.path.join(out_dir, "meta.txt"), meta)
    return meta
