"""Explicit geometry products and evaluation metrics.

The zero level set of a trained field becomes a triangle mesh (marching
cubes on a regular grid, vertices by linear edge interpolation), the mesh
becomes a DSM raster (highest surface point per ground cell), and rasters are
compared with the tolerance-sweep accuracy/completeness curves plus the NMAD
robust noise estimate.

Raster convention: ``heights[i, j]`` is the cell centered at
``origin + ((j + 0.5) * cell, (i + 0.5) * cell)``; row 0 is the southernmost
row. ESRI ASCII grids store rows north to south, so writing/reading flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import FormatError, ValidationError

MESH_CHUNK = 262144
DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) world units
    triangles: np.ndarray  # (F, 3) int indices
    normals: np.ndarray | None = None  # (V, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValidationError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class DsmRaster:
    NODATA = -9999.0

    origin: np.ndarray  # (2,) lower-left corner (world x, y)
    cell: float
    heights: np.ndarray  # (ny, nx), row 0 = southernmost

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.cell <= 0:
            raise ValidationError("DSM cell size must be positive")
        finite = self.heights[self.heights != self.NODATA]
        if finite.size and not np.isfinite(finite).all():
            raise ValidationError("DSM heights must be finite or NODATA")

    @property
    def shape(self):
        return self.heights.shape

    def valid_mask(self) -> np.ndarray:
        return self.heights != self.NODATA

    def same_grid(self, other: "DsmRaster") -> bool:
        return (
            self.shape == other.shape
            and abs(self.cell - other.cell) < 1e-12
            and np.allclose(self.origin, other.origin, atol=1e-9)
        )


@dataclass
class MetricCurve:
    tolerances: list  # in GSD multiples
    values: list  # fractions in [0, 1]

    def __post_init__(self):
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise ValidationError("metric values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Mesh extraction
# ---------------------------------------------------------------------------


def _sample_sdf_grid(field, resolution: int) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, resolution)
    grid = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(grid), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(grid), MESH_CHUNK):
            pts = torch.as_tensor(grid[start : start + MESH_CHUNK], dtype=field.dtype)
            out[start : start + MESH_CHUNK] = field.eval_sdf_only(pts).double().numpy()
    return out.reshape(resolution, resolution, resolution)


def extract_mesh(field, resolution: int, norm=None) -> TriangleMesh:
    """Marching-cubes triangulation of the SDF zero level set.

    Samples the field on a ``resolution``^3 grid over the working domain and
    triangulates with the classic table-driven marching cubes (vertices by
    linear interpolation along sign-changing edges). A field without a sign
    change yields an empty mesh, not an error. ``norm`` (when given)
    denormalizes vertices back to world units.
    """
    from skimage import measure

    if resolution < 2:
        raise ValidationError("mesh grid resolution must be at least 2")
    volume = _sample_sdf_grid(field, resolution)
    if volume.min() > 0 or volume.max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        volume, level=0.0, spacing=(spacing,) * 3, method="lorensen", allow_degenerate=False
    )
    verts = verts - 1.0  # grid index space -> [-1, 1]^3
    if norm is not None:
        verts = norm.invert(verts)
    mesh = TriangleMesh(verts, faces.astype(np.int64))
    keep = mesh.face_areas() > DEGENERATE_AREA
    mesh.triangles = mesh.triangles[keep]
    mesh.normals = _vertex_normals(mesh, field, norm)
    return mesh


def _vertex_normals(mesh: TriangleMesh, field, norm) -> np.ndarray:
    """Area-weighted vertex normals, oriented along increasing SDF."""
    normals = np.zeros_like(mesh.vertices)
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    fn = np.cross(b - a, c - a)
    for k in range(3):
        np.add.at(normals, mesh.triangles[:, k], fn)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(lengths, 1e-20)
    if len(mesh.vertices):
        # Majority-align with the field gradient at a vertex subsample.
        idx = np.linspace(0, len(mesh.vertices) - 1, min(128, len(mesh.vertices))).astype(int)
        pts = mesh.vertices[idx]
        if norm is not None:
            pts = norm.apply(pts)
        with torch.no_grad():
            g = field.normal(torch.as_tensor(np.clip(pts, -1, 1), dtype=field.dtype)).numpy()
        if (np.sum(g * normals[idx]) < 0):
            normals = -normals
    return normals


# ---------------------------------------------------------------------------
# DSM rasterization
# ---------------------------------------------------------------------------


def extract_dsm(mesh: TriangleMesh, cell: float, aoi) -> DsmRaster:
    """Rasterize the highest surface points of a mesh over an AOI rectangle.

    ``aoi`` is (xmin, xmax, ymin, ymax). Each cell keeps the maximum height
    of any triangle covering its center; cells no triangle covers are NODATA.
    """
    if mesh.is_empty:
        raise ValidationError("cannot rasterize an empty mesh")
    if cell <= 0 or aoi[1] <= aoi[0] or aoi[3] <= aoi[2]:
        raise ValidationError("invalid cell size or AOI rectangle")
    nx = int(round((aoi[1] - aoi[0]) / cell))
    ny = int(round((aoi[3] - aoi[2]) / cell))
    heights = np.full((ny, nx), -np.inf)

    v = mesh.vertices
    for tri in mesh.triangles:
        p0, p1, p2 = v[tri[0]], v[tri[1]], v[tri[2]]
        xmin = min(p0[0], p1[0], p2[0])
        xmax = max(p0[0], p1[0], p2[0])
        ymin = min(p0[1], p1[1], p2[1])
        ymax = max(p0[1], p1[1], p2[1])
        j0 = max(int(np.floor((xmin - aoi[0]) / cell - 0.5)), 0)
        j1 = min(int(np.ceil((xmax - aoi[0]) / cell - 0.5)), nx - 1)
        i0 = max(int(np.floor((ymin - aoi[2]) / cell - 0.5)), 0)
        i1 = min(int(np.ceil((ymax - aoi[2]) / cell - 0.5)), ny - 1)
        if j1 < j0 or i1 < i0:
            continue
        xs = aoi[0] + (np.arange(j0, j1 + 1) + 0.5) * cell
        ys = aoi[2] + (np.arange(i0, i1 + 1) + 0.5) * cell
        xx, yy = np.meshgrid(xs, ys)
        # Barycentric coordinates in the xy-plane.
        d = (p1[1] - p2[1]) * (p0[0] - p2[0]) + (p2[0] - p1[0]) * (p0[1] - p2[1])
        if abs(d) < 1e-18:
            continue  # vertical triangle: no footprint
        w0 = ((p1[1] - p2[1]) * (xx - p2[0]) + (p2[0] - p1[0]) * (yy - p2[1])) / d
        w1 = ((p2[1] - p0[1]) * (xx - p2[0]) + (p0[0] - p2[0]) * (yy - p2[1])) / d
        w2 = 1.0 - w0 - w1
        eps = 1e-9
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        if not inside.any():
            continue
        z = w0 * p0[2] + w1 * p1[2] + w2 * p2[2]
        block = heights[i0 : i1 + 1, j0 : j1 + 1]
        np.maximum(block, np.where(inside, z, -np.inf), out=block)

    heights = np.where(np.isfinite(heights), heights, DsmRaster.NODATA)
    return DsmRaster(origin=np.array([aoi[0], aoi[2]]), cell=cell, heights=heights)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_grids(dsm: DsmRaster, gt: DsmRaster) -> None:
    if not dsm.same_grid(gt):
        raise ValidationError("rasters are not co-registered (origin/cell/shape differ)")


def accuracy(dsm: DsmRaster, gt_dsm: DsmRaster, tolerances, gsd: float | None = None) -> MetricCurve:
    """Fraction of reconstructed cells within tolerance of the ground truth.

    Tolerances are GSD multiples (``gsd`` defaults to the raster cell size);
    the denominator is cells where both rasters have data. The curve is
    monotone non-decreasing by construction and asserted to be.
    """
    _check_grids(dsm, gt_dsm)
    if not len(tolerances):
        raise ValidationError("tolerance list must be non-empty")
    unit = gsd if gsd is not None else dsm.cell
    both = dsm.valid_mask() & gt_dsm.valid_mask()
    n = int(both.sum())
    if n == 0:
        values = [0.0 for _ in tolerances]
    else:
        err = np.abs(dsm.heights[both] - gt_dsm.heights[both])
        values = [float((err <= tol * unit).sum() / n) for tol in tolerances]
    curve = MetricCurve(list(tolerances), values)
    assert all(b >= a for a, b in zip(values, values[1:])), "accuracy curve must be monotone"
    return curve


def completeness(dsm: DsmRaster, gt_dsm: DsmRaster, tolerances, gsd: float | None = None) -> MetricCurve:
    """Fraction of ground-truth cells explained by the reconstruction.

    The denominator is every ground-truth cell with data; a cell counts when
    the reconstruction has data there and agrees within tolerance.
    """
    _check_grids(dsm, gt_dsm)
    if not len(tolerances):
        raise ValidationError("tolerance list must be non-empty")
    unit = gsd if gsd is not None else dsm.cell
    gt_valid = gt_dsm.valid_mask()
    n = int(gt_valid.sum())
    if n == 0:
        values = [0.0 for _ in tolerances]
    else:
        both = gt_valid & dsm.valid_mask()
        err = np.abs(dsm.heights[both] - gt_dsm.heights[both])
        values = [float((err <= tol * unit).sum() / n) for tol in tolerances]
    curve = MetricCurve(list(tolerances), values)
    assert all(b >= a for a, b in zip(values, values[1:])), "completeness curve must be monotone"
    return curve


NMAD_CONSTANT = 1.4826  # normal-consistency factor


def nmad(dsm: DsmRaster, gt_dsm: DsmRaster, band: float) -> float:
    """Normalized median absolute deviation of in-band height residuals.

    ``band`` is in height units; residuals with ``|dh| > band`` are excluded.
    An empty in-band set is an error (spread of nothing is undefined).
    """
    _check_grids(dsm, gt_dsm)
    both = dsm.valid_mask() & gt_dsm.valid_mask()
    res = dsm.heights[both] - gt_dsm.heights[both]
    res = res[np.abs(res) <= band]
    if res.size == 0:
        raise ValidationError("no residuals inside the NMAD band")
    return float(NMAD_CONSTANT * np.median(np.abs(res - np.median(res))))


def dsm_diff(dsm: DsmRaster, gt_dsm: DsmRaster) -> DsmRaster:
    """Signed per-cell height difference with NODATA propagation."""
    _check_grids(dsm, gt_dsm)
    both = dsm.valid_mask() & gt_dsm.valid_mask()
    diff = np.where(both, dsm.heights - gt_dsm.heights, DsmRaster.NODATA)
    return DsmRaster(origin=dsm.origin.copy(), cell=dsm.cell, heights=diff)


def diff_image(diff: DsmRaster, saturate: float) -> np.ndarray:
    """Color-map a signed difference raster, saturating at +-saturate.

    Blue = below ground truth, white = equal, red = above; NODATA is black.
    """
    if saturate <= 0:
        raise ValidationError("saturation range must be positive")
    s = np.clip(diff.heights / saturate, -1.0, 1.0)
    img = np.ones(diff.heights.shape + (3,))
    pos = s >= 0
    img[..., 1] = 1.0 - np.abs(s)
    img[..., 2] = np.where(pos, 1.0 - s, 1.0)
    img[..., 0] = np.where(pos, 1.0, 1.0 + s)
    img[~diff.valid_mask()] = 0.0
    # Image rows run top-down; raster rows run south-up.
    return img[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# I/O: ASCII PLY and ESRI ASCII grid
# ---------------------------------------------------------------------------


def save_mesh_ply(path, mesh: TriangleMesh) -> None:
    normals = mesh.normals
    if normals is None:
        normals = np.zeros_like(mesh.vertices)
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property float nx\nproperty float ny\nproperty float nz\n")
        f.write(f"element face {len(mesh.triangles)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v, n in zip(mesh.vertices, normals):
            f.write(
                f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r} "
                f"{float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n"
            )
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_mesh_ply(path) -> TriangleMesh:
    with open(path, "r", encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise FormatError("not a PLY file", path)
        n_vert = n_face = 0
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith("element face"):
                n_face = int(line.split()[-1])
            elif line == "end_header":
                break
        verts = np.empty((n_vert, 3))
        normals = np.empty((n_vert, 3))
        for i in range(n_vert):
            vals = [float(x) for x in f.readline().split()]
            verts[i] = vals[:3]
            normals[i] = vals[3:6]
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            vals = f.readline().split()
            if vals[0] != "3":
                raise FormatError("only triangle faces are supported", path)
            faces[i] = [int(v) for v in vals[1:4]]
    return TriangleMesh(verts, faces, normals)


def save_dsm(path, dsm: DsmRaster) -> None:
    ny, nx = dsm.shape
    with open(path, "w", encoding="ascii") as f:
        f.write(f"ncols {nx}\n")
        f.write(f"nrows {ny}\n")
        f.write(f"xllcorner {float(dsm.origin[0])!r}\n")
        f.write(f"yllcorner {float(dsm.origin[1])!r}\n")
        f.write(f"cellsize {float(dsm.cell)!r}\n")
        f.write(f"NODATA_value {DsmRaster.NODATA!r}\n")
        for row in dsm.heights[::-1]:  # north to south
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_dsm(path) -> DsmRaster:
    with open(path, "r", encoding="ascii") as f:
        header = {}
        for _ in range(6):
            key, value = f.readline().split()
            header[key.lower()] = value
        try:
            nx, ny = int(header["ncols"]), int(header["nrows"])
            origin = np.array([float(header["xllcorner"]), float(header["yllcorner"])])
            cell = float(header["cellsize"])
            nodata = float(header["nodata_value"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"bad ESRI grid header: {e}", path) from None
        data = np.loadtxt(f, dtype=np.float64)
    data = data.reshape(ny, nx)[::-1].copy()
    if nodata != DsmRaster.NODATA:
        data[data == nodata] = DsmRaster.NODATA
    return DsmRaster(origin=origin, cell=cell, heights=data)
