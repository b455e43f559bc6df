"""Synthetic surfaces with analytic normals: local quadrics, S-cylinders, open scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloud, normalize_rows


@dataclass(frozen=True)
class QuadricSpec:
    kappa1: float
    kappa2: float
    extent: float = 1.0
    spacing: float = 0.02

    def __post_init__(self) -> None:
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def kind(self) -> str:
        k = self.kappa1 * self.kappa2
        if self.kappa1 == 0 and self.kappa2 == 0:
            return "plane"
        if k > 0:
            return "elliptic paraboloid"
        if k < 0:
            return "hyperbolic paraboloid"
        return "parabolic cylinder"


def quadric_height(spec: QuadricSpec, x, y):
    return 0.5 * (spec.kappa1 * np.asarray(x) ** 2 + spec.kappa2 * np.asarray(y) ** 2)


def quadric_normal(spec: QuadricSpec, x, y) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = np.stack([-spec.kappa1 * x, -spec.kappa2 * y, np.ones_like(x)], axis=-1)
    return normalize_rows(g)


def _grid(extent: float, spacing: float) -> NDArray:
    m = int(np.floor(2 * extent / spacing + 1e-9)) + 1
    return -extent + spacing * np.arange(m)


def quadric_grid(spec: QuadricSpec) -> tuple[NDArray, NDArray]:
    """Regular-grid samples as (points, normals), each (m, m, 3)."""
    t = _grid(spec.extent, spec.spacing)
    x, y = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([x, y, quadric_height(spec, x, y)], axis=-1)
    return pts, quadric_normal(spec, x, y).reshape(pts.shape)


def sample_quadric(spec: QuadricSpec) -> PointCloud:
    """Grid samples of z = (k1 x^2 + k2 y^2) / 2 with unit normals along (-dz/dx, -dz/dy, 1)."""
    pts, nrm = quadric_grid(spec)
    return PointCloud(pts.reshape(-1, 3), gt_normals=nrm.reshape(-1, 3))


def grid_mesh_faces(rows: int, cols: int) -> NDArray[np.int64]:
    """Two triangles per grid cell for a row-major (rows, cols) vertex grid."""
    if rows < 2 or cols < 2:
        return np.zeros((0, 3), dtype=np.int64)
    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (r * cols + c).ravel()
    b, d, e = a + 1, a + cols, a + cols + 1
    return np.concatenate([np.stack([a, d, b], 1), np.stack([b, d, e], 1)]).astype(np.int64)


def s_curve(amplitude: float = 1.0, half_width: float = 1.0, spacing: float = 0.02):
    """Arc-length samples of z = a x^3 on [-w, w]: (points (m, 2), unit normals (m, 2), curvature (m,))."""
    xs = np.linspace(-half_width, half_width, 20001)
    dz = 3 * amplitude * xs**2
    seg = np.sqrt(1 + dz**2)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (seg[1:] + seg[:-1]) * np.diff(xs))])
    m = max(int(np.floor(s[-1] / spacing + 1e-9)) + 1, 2) if half_width > 0 else 1
    x = np.interp(np.linspace(0, s[-1], m), s, xs) if m > 1 else np.zeros(1)
    z = amplitude * x**3
    d1 = 3 * amplitude * x**2
    d2 = 6 * amplitude * x
    nrm = np.stack([-d1, np.ones_like(x)], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    curvature = d2 / (1 + d1**2) ** 1.5
    return np.stack([x, z], axis=1), nrm, curvature


def s_cylinder_grid(amplitude: float = 1.0, half_width: float = 1.0, sweep: float = 2.0, spacing: float = 0.02):
    """Sweep of the cubic S-curve along y; (points, normals) as (m, k, 3) grids."""
    xz, n2, _ = s_curve(amplitude, half_width, spacing)
    k = int(np.floor(sweep / spacing + 1e-9)) + 1 if sweep > 0 else 1
    ys = (np.arange(k) * spacing - sweep / 2.0) if k > 1 else np.zeros(1)
    pts = np.empty((len(xz), k, 3))
    pts[:, :, 0] = xz[:, None, 0]
    pts[:, :, 1] = ys[None, :]
    pts[:, :, 2] = xz[:, None, 1]
    nrm = np.zeros_like(pts)
    nrm[:, :, 0] = n2[:, None, 0]
    nrm[:, :, 2] = n2[:, None, 1]
    return pts, nrm


def sample_s_cylinder(amplitude: float = 1.0, half_width: float = 1.0, sweep: float = 2.0, spacing: float = 0.02) -> PointCloud:
    """Cylinder over a planar cubic with an inflection at x = 0 (a line of flat umbilics)."""
    pts, nrm = s_cylinder_grid(amplitude, half_width, sweep, spacing)
    return PointCloud(pts.reshape(-1, 3), gt_normals=nrm.reshape(-1, 3))


@dataclass(frozen=True)
class Patch:
    """Planar parallelogram ``origin + s*u + t*v`` for s, t in [0, 1], normal along u x v."""

    origin: tuple[float, float, float]
    u: tuple[float, float, float]
    v: tuple[float, float, float]
    flip: bool = False

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    @property
    def normal(self) -> NDArray:
        n = np.cross(self.u, self.v)
        n = n / np.linalg.norm(n)
        return -n if self.flip else n


@dataclass(frozen=True)
class SceneSpec:
    name: str
    patches: tuple[Patch, ...]
    n_points: int = 50_000
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _sample_patch(p: Patch, count: int, rng: np.random.Generator) -> NDArray:
    """Jittered-grid samples: one uniform point in each of ``count`` randomly chosen cells."""
    lu, lv = np.linalg.norm(p.u), np.linalg.norm(p.v)
    nu = max(1, int(round(np.sqrt(count * lu / lv))))
    nv = max(1, int(np.ceil(count / nu)))
    cells = np.sort(rng.choice(nu * nv, size=count, replace=False))
    iu, iv = cells // nv, cells % nv
    s = (iu + rng.random(count)) / nu
    t = (iv + rng.random(count)) / nv
    return np.asarray(p.origin) + s[:, None] * np.asarray(p.u) + t[:, None] * np.asarray(p.v)


def build_scene(spec: SceneSpec) -> PointCloud:
    """Union of patches with area-proportional sample counts; noise displaces along the normal."""
    rng = np.random.default_rng(spec.seed)
    areas = np.array([p.area for p in spec.patches])
    counts = np.floor(spec.n_points * areas / areas.sum()).astype(int)
    rest = spec.n_points - counts.sum()
    frac = spec.n_points * areas / areas.sum() - counts
    counts[np.argsort(-frac, kind="stable")[:rest]] += 1
    pts, nrm = [], []
    for p, c in zip(spec.patches, counts):
        if c == 0:
            continue
        pts.append(_sample_patch(p, int(c), rng))
        nrm.append(np.tile(p.normal, (int(c), 1)))
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, len(pts))[:, None] * nrm
    return PointCloud(pts, gt_normals=nrm)


def plane_scene(n_points: int = 10_000, size: float = 2.0, noise_sigma: float = 0.0, seed: int = 0) -> SceneSpec:
    return SceneSpec("plane", (Patch((0, 0, 0), (size, 0, 0), (0, size, 0)),), n_points, noise_sigma, seed)


def open_room(n_points: int = 50_000, noise_sigma: float = 0.0, seed: int = 0) -> SceneSpec:
    """Floor, three walls and a table (top plus four skirts) in a 4 x 3 x 2.5 room.

    All normals face into the room. The floor under the table is left out,
    so the skirts join the floor along the footprint.
    """
    W, D, H = 4.0, 3.0, 2.5
    x0, x1, y0, y1, h = 1.4, 2.6, 1.1, 1.9, 0.75
    patches = (
        # floor around the table footprint, normal +z
        Patch((0, 0, 0), (W, 0, 0), (0, y0, 0)),
        Patch((0, y1, 0), (W, 0, 0), (0, D - y1, 0)),
        Patch((0, y0, 0), (x0, 0, 0), (0, y1 - y0, 0)),
        Patch((x1, y0, 0), (W - x1, 0, 0), (0, y1 - y0, 0)),
        # walls facing inwards
        Patch((0, 0, 0), (0, D, 0), (0, 0, H)),  # x = 0, normal +x
        Patch((W, 0, 0), (0, 0, H), (0, D, 0)),  # x = W, normal -x
        Patch((0, D, 0), (W, 0, 0), (0, 0, H)),  # y = D, normal -y
        # table top and skirts facing outwards
        Patch((x0, y0, h), (x1 - x0, 0, 0), (0, y1 - y0, 0)),
        Patch((x0, y0, 0), (x1 - x0, 0, 0), (0, 0, h)),  # y = y0, normal -y
        Patch((x0, y1, 0), (0, 0, h), (x1 - x0, 0, 0)),  # y = y1, normal +y
        Patch((x0, y0, 0), (0, 0, h), (0, y1 - y0, 0)),  # x = x0, normal -x
        Patch((x1, y0, 0), (0, y1 - y0, 0), (0, 0, h)),  # x = x1, normal +x
    )
    return SceneSpec("open_room", patches, n_points, noise_sigma, seed)


PRESETS = {
    "plane": plane_scene,
    "open_room": open_room,
}

NOISE1_SIGMA = 0.004
NOISE2_SIGMA = 0.008
