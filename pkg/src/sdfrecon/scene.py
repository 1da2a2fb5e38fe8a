"""Posed cameras, tie points, and ray generation.

Conventions used throughout the package:

* Cameras are ideal pinholes. ``rotation`` maps world to camera coordinates,
  camera axes are x right, y down, z forward (the viewing direction), so a
  world point ``p`` sits at ``rotation @ (p - center)`` in camera space.
* Pixel coordinates are continuous; integer ``(u, v)`` is the center of the
  pixel in column ``u`` of row ``v``.
* Depths attached to observations are view-space z-depths (distance along the
  optical axis). Distances along a ray (the ``t`` parameter) are converted
  where needed via ``t = depth / cos(angle to axis)``.
* The field's working domain is the cube [-1, 1]^3; :class:`SceneNormalization`
  maps world coordinates into it.

On-disk formats (whitespace-separated decimal text, one record per line):

* camera file:    ``id width height focal ppx ppy r11 r12 r13 r21 r22 r23
  r31 r32 r33 cx cy cz``
* tie-point file: ``x y z n  i1 u1 v1  i2 u2 v2 ...`` with ``n`` observations.

Scene data is immutable after loading; concurrent reads are safe.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .errors import (
    BehindCameraError,
    EmptyIntersectionError,
    FormatError,
    ValidationError,
)

ORTHONORMAL_TOL = 1e-9
T_NEAR_MIN = 1e-4
BBOX_PADDING = 0.10


@dataclass(frozen=True)
class CameraView:
    """A posed pinhole camera."""

    id: int
    width: int
    height: int
    focal: float
    principal_point: np.ndarray  # (2,)
    rotation: np.ndarray  # (3, 3) world-to-camera
    center: np.ndarray  # (3,) world position
    gsd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.focal <= 0:
            raise ValidationError(f"camera {self.id}: focal must be positive, got {self.focal}")
        if self.gsd <= 0:
            raise ValidationError(f"camera {self.id}: gsd must be positive, got {self.gsd}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"camera {self.id}: non-positive image size")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValidationError(
                f"camera {self.id}: rotation not orthonormal (max |R^T R - I| = {err:.3e})"
            )

    @property
    def viewing_axis(self) -> np.ndarray:
        """Unit optical axis in world coordinates (camera z)."""
        return self.rotation[2]

    def contains_pixel(self, pixel) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return -0.5 <= u <= self.width - 0.5 and -0.5 <= v <= self.height - 0.5


@dataclass(frozen=True)
class Ray:
    """Origin + unit direction with entry/exit distances into the domain."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"ray direction not unit length (norm {norm})")
        if not (0 <= self.t_near < self.t_far):
            raise ValidationError(f"invalid ray bounds [{self.t_near}, {self.t_far}]")

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class TiePoint:
    """A 3D point with its 2D observations and per-view depths."""

    point: np.ndarray  # (3,)
    observations: list[tuple[int, np.ndarray]]  # (view id, pixel (2,))
    depths: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.observations = [(int(i), np.asarray(p, dtype=np.float64)) for i, p in self.observations]
        if len(self.observations) < 2:
            raise ValidationError(
                f"tie point needs >= 2 observations, got {len(self.observations)}"
            )
        if self.depths and any(d <= 0 for d in self.depths):
            raise ValidationError("tie-point depths must be positive")


@dataclass(frozen=True)
class SceneNormalization:
    """Similarity transform into the [-1, 1]^3 working domain.

    ``normalized = (world + translation) * scale``. Lengths (depths, GSD)
    scale by ``scale``; directions are unchanged. The transform maps the
    padded tie-point bounding box into the domain; camera centers may land
    outside it (their rays are clipped to the domain).
    """

    scale: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.scale <= 0:
            raise ValidationError(f"normalization scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation

    def apply_camera(self, view: CameraView) -> CameraView:
        return replace(
            view,
            center=self.apply(view.center),
            gsd=view.gsd * self.scale,
        )

    def apply_tiepoint(self, tp: TiePoint) -> TiePoint:
        return TiePoint(
            point=self.apply(tp.point),
            observations=[(i, p.copy()) for i, p in tp.observations],
            depths=[d * self.scale for d in tp.depths],
        )

    @staticmethod
    def identity() -> "SceneNormalization":
        return SceneNormalization(1.0, np.zeros(3))


class CameraSet:
    """Immutable id-indexed collection of views."""

    def __init__(self, views: list[CameraView]):
        ids = [v.id for v in views]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate camera ids")
        self._views = {v.id: v for v in views}
        self._order = list(views)

    def __len__(self):
        return len(self._order)

    def __iter__(self):
        return iter(self._order)

    def __getitem__(self, view_id: int) -> CameraView:
        try:
            return self._views[view_id]
        except KeyError:
            raise ValidationError(f"unknown view id {view_id}") from None

    def __contains__(self, view_id: int) -> bool:
        return view_id in self._views

    @property
    def ids(self) -> list[int]:
        return [v.id for v in self._order]


class TiePointSet:
    def __init__(self, points: list[TiePoint]):
        self._points = list(points)

    def __len__(self):
        return len(self._points)

    def __iter__(self):
        return iter(self._points)

    def __getitem__(self, idx: int) -> TiePoint:
        return self._points[idx]

    def positions(self) -> np.ndarray:
        return np.array([tp.point for tp in self._points], dtype=np.float64).reshape(-1, 3)


class ImageSet:
    """Per-view images as float arrays in [0, 1]."""

    def __init__(self, images: dict[int, np.ndarray]):
        self._images = dict(images)

    def __len__(self):
        return len(self._images)

    def __contains__(self, view_id: int) -> bool:
        return view_id in self._images

    def __getitem__(self, view_id: int) -> np.ndarray:
        try:
            return self._images[view_id]
        except KeyError:
            raise ValidationError(f"no image for view id {view_id}") from None

    def ids(self) -> list[int]:
        return sorted(self._images)


# ---------------------------------------------------------------------------
# Projection and rays
# ---------------------------------------------------------------------------


def project(view: CameraView, point) -> tuple[np.ndarray, float]:
    """Pinhole-project a world point; returns (pixel, view-space z-depth)."""
    p_cam = view.rotation @ (np.asarray(point, dtype=np.float64) - view.center)
    depth = float(p_cam[2])
    if depth <= 0:
        raise BehindCameraError(f"point behind camera {view.id} (depth {depth:.6g})")
    pixel = view.focal * p_cam[:2] / depth + view.principal_point
    return pixel, depth


def project_points(view: CameraView, points: np.ndarray):
    """Vectorized :func:`project`; returns (pixels (N,2), depths (N,)).

    Does not raise for points behind the camera; callers filter on depth.
    """
    p_cam = (np.asarray(points, dtype=np.float64) - view.center) @ view.rotation.T
    depths = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = view.focal * p_cam[:, :2] / depths[:, None] + view.principal_point
    return pixels, depths


def _domain_span(origins: np.ndarray, directions: np.ndarray):
    """Slab intersection of rays with [-1, 1]^3. Returns (t_near, t_far)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
    t0 = (-1.0 - origins) * inv
    t1 = (1.0 - origins) * inv
    # Parallel-axis rays: intersection span is (-inf, inf) if inside the slab,
    # empty otherwise.
    parallel = directions == 0.0
    inside = np.abs(origins) <= 1.0
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    return t_near, t_far


def pixel_ray(view: CameraView, pixel, norm: SceneNormalization | None = None) -> Ray:
    """Ray through a pixel, clipped to the [-1, 1]^3 working domain.

    ``view`` is given in world coordinates; ``norm`` (identity when omitted)
    maps it into the domain. The returned origin/t values are in normalized
    units.
    """
    if not view.contains_pixel(pixel):
        raise ValidationError(f"pixel {tuple(pixel)} outside image of view {view.id}")
    if norm is None:
        norm = SceneNormalization.identity()
    d_cam = np.array(
        [
            (pixel[0] - view.principal_point[0]) / view.focal,
            (pixel[1] - view.principal_point[1]) / view.focal,
            1.0,
        ]
    )
    direction = view.rotation.T @ d_cam
    direction /= np.linalg.norm(direction)
    origin = norm.apply(view.center)
    t_near, t_far = _domain_span(origin[None, :], direction[None, :])
    t_near = max(float(t_near[0]), T_NEAR_MIN)
    t_far = float(t_far[0])
    if not t_near < t_far:
        raise EmptyIntersectionError(
            f"ray through pixel {tuple(pixel)} of view {view.id} misses the working domain"
        )
    return Ray(origin, direction, t_near, t_far)


def pixel_directions(view: CameraView, pixels: np.ndarray) -> np.ndarray:
    """Unit world-space ray directions through (N, 2) pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack(
        [
            (pixels[:, 0] - view.principal_point[0]) / view.focal,
            (pixels[:, 1] - view.principal_point[1]) / view.focal,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    directions = d_cam @ view.rotation
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def camera_rays(view: CameraView, pixels: np.ndarray, norm: SceneNormalization | None = None):
    """Vectorized ray generation for (N, 2) pixel coordinates.

    Returns (origins (N,3), directions (N,3), t_near (N,), t_far (N,),
    valid (N,) bool). Rays that miss the domain are flagged invalid instead
    of raising.
    """
    if norm is None:
        norm = SceneNormalization.identity()
    directions = pixel_directions(view, pixels)
    origin = norm.apply(view.center)
    origins = np.broadcast_to(origin, directions.shape).copy()
    t_near, t_far = _domain_span(origins, directions)
    t_near = np.maximum(t_near, T_NEAR_MIN)
    valid = t_near < t_far
    return origins, directions, t_near, t_far, valid


def tiepoint_depths(tp: TiePoint, cameras: CameraSet) -> list[float]:
    """Per-observation view-space depths of a tie point (stored on it)."""
    depths = []
    for j, (view_id, _pixel) in enumerate(tp.observations):
        view = cameras[view_id]
        try:
            _, depth = project(view, tp.point)
        except BehindCameraError as e:
            raise BehindCameraError(
                f"tie-point observation {j} is behind view {view_id}: {e}"
            ) from None
        depths.append(depth)
    tp.depths = depths
    return depths


def normalize_scene(cameras: CameraSet, tiepoints: TiePointSet) -> SceneNormalization:
    """Fit the working-domain transform from the tie-point bounding box.

    The padded (10%) tie-point box maps into [-1, 1]^3 with one isotropic
    scale; a degenerate (zero-extent) box is an error. Camera centers are
    deliberately NOT folded in: aerial cameras fly far above the surveyed
    volume, and modeling the dead air shell around each camera invites
    per-view "decal" geometry that no other view can refute. Rays from
    outside cameras are clipped to the domain on entry.
    """
    if len(tiepoints) == 0:
        raise ValidationError("cannot normalize an empty tie-point set")
    pts = tiepoints.positions()
    tp_extent = pts.max(axis=0) - pts.min(axis=0)
    if tp_extent.max() <= 0:
        raise ValidationError("degenerate tie-point bounding box (zero extent)")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max()) * (1.0 + BBOX_PADDING)
    mid = (lo + hi) / 2.0
    return SceneNormalization(scale=2.0 / extent, translation=-mid)


# ---------------------------------------------------------------------------
# Loading and saving
# ---------------------------------------------------------------------------


def _parse_floats(fields, n, path, lineno):
    if len(fields) != n:
        raise FormatError(f"expected {n} fields, got {len(fields)}", path, lineno)
    try:
        return [float(v) for v in fields]
    except ValueError as e:
        raise FormatError(f"bad number: {e}", path, lineno) from None


def load_cameras(path, gsd: float = 1.0) -> CameraSet:
    views = []
    try:
        lines = open(path, "r", encoding="utf-8").read().splitlines()
    except OSError as e:
        raise FormatError(f"cannot read camera file: {e}", path) from e
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        vals = _parse_floats(body.split(), 18, path, lineno)
        rot = np.array(vals[6:15]).reshape(3, 3)
        try:
            views.append(
                CameraView(
                    id=int(vals[0]),
                    width=int(vals[1]),
                    height=int(vals[2]),
                    focal=vals[3],
                    principal_point=np.array(vals[4:6]),
                    rotation=rot,
                    center=np.array(vals[15:18]),
                    gsd=gsd,
                )
            )
        except ValidationError as e:
            raise FormatError(str(e), path, lineno) from None
    return CameraSet(views)


def save_cameras(path, cameras: CameraSet) -> None:
    ff = fileio.format_float
    with open(path, "w", encoding="utf-8") as f:
        for v in cameras:
            parts = [str(v.id), str(v.width), str(v.height), ff(v.focal)]
            parts += [ff(x) for x in v.principal_point]
            parts += [ff(x) for x in v.rotation.ravel()]
            parts += [ff(x) for x in v.center]
            f.write(" ".join(parts) + "\n")


def load_tiepoints(path, cameras: CameraSet | None = None) -> TiePointSet:
    points = []
    try:
        lines = open(path, "r", encoding="utf-8").read().splitlines()
    except OSError as e:
        raise FormatError(f"cannot read tie-point file: {e}", path) from e
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.split()
        if len(fields) < 4:
            raise FormatError("tie-point record too short", path, lineno)
        try:
            xyz = [float(v) for v in fields[:3]]
            n_obs = int(fields[3])
        except ValueError as e:
            raise FormatError(f"bad number: {e}", path, lineno) from None
        rest = _parse_floats(fields[4:], 3 * n_obs, path, lineno)
        obs = []
        for k in range(n_obs):
            view_id = int(rest[3 * k])
            pixel = np.array(rest[3 * k + 1 : 3 * k + 3])
            if cameras is not None and view_id not in cameras:
                raise FormatError(f"observation references unknown view id {view_id}", path, lineno)
            obs.append((view_id, pixel))
        try:
            points.append(TiePoint(point=np.array(xyz), observations=obs))
        except ValidationError as e:
            raise FormatError(str(e), path, lineno) from None
    return TiePointSet(points)


def save_tiepoints(path, tiepoints: TiePointSet) -> None:
    ff = fileio.format_float
    with open(path, "w", encoding="utf-8") as f:
        for tp in tiepoints:
            parts = [ff(x) for x in tp.point] + [str(len(tp.observations))]
            for view_id, pixel in tp.observations:
                parts += [str(view_id), ff(pixel[0]), ff(pixel[1])]
            f.write(" ".join(parts) + "\n")


def load_images(image_dir, cameras: CameraSet) -> ImageSet:
    images = {}
    for view in cameras:
        found = None
        for ext in (".ppm", ".png"):
            candidate = os.path.join(os.fspath(image_dir), f"{view.id:04d}{ext}")
            if os.path.exists(candidate):
                found = candidate
                break
        if found is None:
            raise FormatError(f"missing image for view {view.id} in {image_dir}")
        img = fileio.read_image(found)
        if img.shape[0] != view.height or img.shape[1] != view.width:
            raise ValidationError(
                f"view {view.id}: image is {img.shape[1]}x{img.shape[0]} "
                f"but camera record says {view.width}x{view.height}"
            )
        images[view.id] = img
    return ImageSet(images)


def load_scene(camera_path, image_dir, tiepoint_path, gsd: float = 1.0):
    """Load and cross-validate a dataset. Returns (CameraSet, ImageSet, TiePointSet).

    Tie-point depths are computed on load; every observation must reference a
    loaded view and sit in front of it.
    """
    cameras = load_cameras(camera_path, gsd=gsd)
    images = load_images(image_dir, cameras)
    tiepoints = load_tiepoints(tiepoint_path, cameras)
    for tp in tiepoints:
        tiepoint_depths(tp, cameras)
    return cameras, images, tiepoints
