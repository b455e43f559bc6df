"""Pairwise block consistency from visible connected regions.

Two adjacent blocks are rendered together into a z-buffer from twelve
viewpoints. Pixels whose depths differ by no more than the largest per-face
depth span are joined into regions; each region is split into pieces of
uniform facing sign, and a piece scores (boundary pixels) x (pixels of
block 1) x (pixels of block 2). Consistently oriented blocks produce large
mixed-block pieces, inconsistent ones fragment along the seam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial import cKDTree

from .refine import TriangleMesh

log = logging.getLogger(__name__)

PHI = (1.0 + 5.0**0.5) / 2.0
NONE, B1, B2 = 0, 1, 2
SPLAT_SIDES = 8
SPLAT_SCALE = 1.5
VIEW_DISTANCE = 3.0
DEPTH_TOL = 1e-9


class DegenerateViewError(ValueError):
    pass


@dataclass
class ViewConfig:
    viewpoint: NDArray[np.float64]
    view_dir: NDArray[np.float64]
    resolution: int = 400
    tan_half_fov: float = 0.375

    def __post_init__(self) -> None:
        self.viewpoint = np.asarray(self.viewpoint, dtype=np.float64)
        d = np.asarray(self.view_dir, dtype=np.float64)
        self.view_dir = d / np.linalg.norm(d)
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")

    def basis(self) -> tuple[NDArray, NDArray, NDArray]:
        f = self.view_dir
        helper = np.array([0.0, 0.0, 1.0]) if abs(f[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(f, helper)
        right /= np.linalg.norm(right)
        up = np.cross(right, f)
        return right, up, f

    def depth(self, x: NDArray) -> NDArray:
        return (np.asarray(x) - self.viewpoint) @ self.view_dir

    def project(self, x: NDArray) -> tuple[NDArray, NDArray]:
        """Pixel coordinates (..., 2) and view depth (...) of points ``x``."""
        right, up, f = self.basis()
        c = np.asarray(x, dtype=np.float64) - self.viewpoint
        z = c @ f
        zs = np.where(np.abs(z) > 1e-300, z, 1e-300)
        sx = (c @ right) / zs / self.tan_half_fov
        sy = (c @ up) / zs / self.tan_half_fov
        res = self.resolution
        px = (sx + 1.0) * 0.5 * res
        py = (1.0 - sy) * 0.5 * res
        return np.stack([px, py], axis=-1), z


def icosahedron_directions() -> NDArray[np.float64]:
    """Unit directions to the 12 face centroids of a regular dodecahedron."""
    v = []
    for a in (-1.0, 1.0):
        for b in (-1.0, 1.0):
            v += [(0.0, a, b * PHI), (a, b * PHI, 0.0), (b * PHI, 0.0, a)]
    v = np.asarray(v)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def dodecahedron_views(points1: NDArray, points2: NDArray | None = None, resolution: int = 400) -> list[ViewConfig]:
    """Twelve views from the face centroids of a dodecahedron around the union of both blocks."""
    pts = np.asarray(points1, dtype=np.float64).reshape(-1, 3)
    if points2 is not None:
        pts = np.concatenate([pts, np.asarray(points2, dtype=np.float64).reshape(-1, 3)])
    if len(pts) == 0:
        raise ValueError("blocks are empty")
    center = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    if radius <= 1e-12 * max(1.0, float(np.abs(center).max())):
        raise DegenerateViewError("all points coincide; no view can separate them")
    dist = VIEW_DISTANCE * radius
    tan_half = radius / np.sqrt(dist**2 - radius**2) * 1.02
    return [
        ViewConfig(center + dist * d, -d, resolution, tan_half)
        for d in icosahedron_directions()
    ]


@dataclass
class Geometry:
    """Triangles to rasterise for one block pair.

    ``normals`` orient each face for the facing sign; the winding of the
    vertices is irrelevant. Splat geometry keeps its centres, normals and
    radii so the depth threshold can use the exact disc span.
    """

    triangles: NDArray[np.float64]  # (F, 3, 3)
    normals: NDArray[np.float64]  # (F, 3)
    tags: NDArray[np.int8]  # (F,) in {1, 2}
    splat_centers: NDArray | None = None
    splat_normals: NDArray | None = None
    splat_radii: NDArray | None = None
    splat_tags: NDArray | None = None

    def __len__(self) -> int:
        return len(self.triangles)

    def with_block2_negated(self) -> Geometry:
        nrm = np.where((self.tags == B2)[:, None], -self.normals, self.normals)
        sn = None
        if self.splat_normals is not None:
            sn = np.where((self.splat_tags == B2)[:, None], -self.splat_normals, self.splat_normals)
        return Geometry(self.triangles, nrm, self.tags, self.splat_centers, sn, self.splat_radii, self.splat_tags)

    def negated(self) -> Geometry:
        sn = None if self.splat_normals is None else -self.splat_normals
        return Geometry(self.triangles, -self.normals, self.tags, self.splat_centers, sn, self.splat_radii, self.splat_tags)


def _canonical_axis(n: NDArray) -> NDArray:
    """Flip each normal so its largest-magnitude component is positive (sign-free geometry)."""
    idx = np.argmax(np.abs(n), axis=1)
    s = np.sign(n[np.arange(len(n)), idx])
    s[s == 0] = 1.0
    return n * s[:, None]


def splat_triangles(centers: NDArray, normals: NDArray, radii: NDArray, sides: int = SPLAT_SIDES) -> NDArray:
    """Fan of ``sides`` triangles per disc; (P * sides, 3, 3). Independent of normal sign."""
    c = np.asarray(centers, dtype=np.float64)
    g = _canonical_axis(np.asarray(normals, dtype=np.float64))
    helper = np.where(np.abs(g[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(g, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(g, u)
    th = 2 * np.pi * np.arange(sides + 1) / sides
    ring = c[:, None, :] + np.asarray(radii)[:, None, None] * (
        np.cos(th)[None, :, None] * u[:, None, :] + np.sin(th)[None, :, None] * v[:, None, :]
    )
    tri = np.empty((len(c), sides, 3, 3))
    tri[:, :, 0] = c[:, None, :]
    tri[:, :, 1] = ring[:, :-1]
    tri[:, :, 2] = ring[:, 1:]
    return tri.reshape(-1, 3, 3)


def local_spacing(points: NDArray, k: int = 3) -> NDArray[np.float64]:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return np.ones(len(pts))
    k = min(k, len(pts) - 1)
    d, _ = cKDTree(pts).query(pts, k=k + 1)
    return d[:, 1:].mean(axis=1)


def splat_geometry(points1, normals1, points2, normals2, spacing1=None, spacing2=None) -> Geometry:
    parts = []
    for tag, p, n, s in ((B1, points1, normals1, spacing1), (B2, points2, normals2, spacing2)):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
        if s is None:
            s = local_spacing(p)
        parts.append((tag, p, n, SPLAT_SCALE * np.asarray(s, dtype=np.float64)))
    centers = np.concatenate([q[1] for q in parts])
    normals = np.concatenate([q[2] for q in parts])
    radii = np.concatenate([q[3] for q in parts])
    stags = np.concatenate([np.full(len(q[1]), q[0], dtype=np.int8) for q in parts])
    tri = splat_triangles(centers, normals, radii)
    return Geometry(
        tri,
        np.repeat(normals, SPLAT_SIDES, axis=0),
        np.repeat(stags, SPLAT_SIDES),
        centers, normals, radii, stags,
    )


def mesh_geometry(mesh1: TriangleMesh, mesh2: TriangleMesh) -> Geometry:
    tri = np.concatenate([mesh1.vertices[mesh1.faces], mesh2.vertices[mesh2.faces]])
    nrm = np.concatenate([mesh1.face_normals, mesh2.face_normals])
    tags = np.concatenate([np.full(len(mesh1), B1, np.int8), np.full(len(mesh2), B2, np.int8)])
    keep = np.concatenate([mesh1.areas, mesh2.areas]) > 0
    return Geometry(tri[keep], nrm[keep], tags[keep])


@dataclass
class RasterBuffer:
    tag: NDArray[np.int8]  # (H, W): 0 none, 1 / 2 block
    depth: NDArray[np.float64]  # inf where empty
    sign: NDArray[np.int8]  # +1 / -1 facing sign, 0 where empty
    boundary: NDArray[np.bool_]
    face: NDArray[np.int64]

    @property
    def shape(self) -> tuple[int, int]:
        return self.tag.shape

    def with_block2_negated(self) -> RasterBuffer:
        s = np.where(self.tag == B2, -self.sign, self.sign).astype(np.int8)
        return RasterBuffer(self.tag, self.depth, s, self.boundary, self.face)


@njit(cache=True, nogil=True)
def _raster_kernel(xy, z, res):
    depth = np.full((res, res), np.inf)
    face = np.full((res, res), -1, dtype=np.int64)
    for f in range(xy.shape[0]):
        x0, y0 = xy[f, 0, 0], xy[f, 0, 1]
        x1, y1 = xy[f, 1, 0], xy[f, 1, 1]
        x2, y2 = xy[f, 2, 0], xy[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0 or not np.isfinite(area):
            continue
        xmin = max(int(np.floor(min(x0, x1, x2))), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2))), res - 1)
        ymin = max(int(np.floor(min(y0, y1, y2))), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2))), res - 1)
        inv = 1.0 / area
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) * inv
                w1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = w0 * z[f, 0] + w1 * z[f, 1] + w2 * z[f, 2]
                if d < depth[py, px]:
                    depth[py, px] = d
                    face[py, px] = f
    return depth, face


def face_signs(geometry: Geometry, view: ViewConfig) -> NDArray[np.int8]:
    """+1 where the view ray runs along the face normal (back side seen), -1 otherwise."""
    ray = geometry.triangles.mean(axis=1) - view.viewpoint
    dots = np.einsum("fd,fd->f", ray, geometry.normals)
    return np.where(dots >= 0, 1, -1).astype(np.int8)


def mark_boundary(tag: NDArray) -> NDArray[np.bool_]:
    """Tagged pixels whose closed 4-neighbourhood holds both block tags."""
    has = []
    for t in (B1, B2):
        m = tag == t
        h = m.copy()
        h[1:] |= m[:-1]
        h[:-1] |= m[1:]
        h[:, 1:] |= m[:, :-1]
        h[:, :-1] |= m[:, 1:]
        has.append(h)
    return has[0] & has[1] & (tag != NONE)


def rasterize_pair(geometry: Geometry, view: ViewConfig) -> RasterBuffer:
    res = view.resolution
    if len(geometry) == 0:
        empty = np.zeros((res, res), dtype=np.int8)
        return RasterBuffer(empty, np.full((res, res), np.inf), empty.copy(), np.zeros((res, res), bool), np.full((res, res), -1))
    xy, z = view.project(geometry.triangles)
    front = np.all(z > 0, axis=1)
    xy = np.where(front[:, None, None], xy, np.nan)
    depth, face = _raster_kernel(np.ascontiguousarray(xy), np.ascontiguousarray(z), res)
    hit = face >= 0
    fs = face_signs(geometry, view)
    tag = np.zeros((res, res), dtype=np.int8)
    sign = np.zeros((res, res), dtype=np.int8)
    tag[hit] = geometry.tags[face[hit]]
    sign[hit] = fs[face[hit]]
    return RasterBuffer(tag, depth, sign, mark_boundary(tag), face)


def compute_eta(geometry: Geometry, view: ViewConfig) -> float:
    """Largest depth span of any single primitive as seen from ``view``."""
    if len(geometry) == 0:
        return 0.0
    if geometry.splat_centers is not None:
        f = view.view_dir
        cos = np.abs(geometry.splat_normals @ f)
        span = 2.0 * geometry.splat_radii * np.sqrt(np.clip(1.0 - cos**2, 0.0, None))
        return float(span.max())
    d = view.depth(geometry.triangles)
    return float((d.max(axis=1) - d.min(axis=1)).max())


def _grid_edges(ok_h: NDArray, ok_v: NDArray, ids: NDArray):
    rows = np.concatenate([ids[:, :-1][ok_h], ids[:-1, :][ok_v]])
    cols = np.concatenate([ids[:, 1:][ok_h], ids[1:, :][ok_v]])
    return rows, cols


def _label(mask: NDArray, ok_h: NDArray, ok_v: NDArray) -> tuple[NDArray[np.int64], int]:
    """Component labels of ``mask`` pixels joined by the allowed 4-neighbour links (-1 elsewhere)."""
    n = int(mask.sum())
    labels = np.full(mask.shape, -1, dtype=np.int64)
    if n == 0:
        return labels, 0
    ids = np.full(mask.shape, -1, dtype=np.int64)
    ids[mask] = np.arange(n)
    r, c = _grid_edges(ok_h, ok_v, ids)
    g = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    ncomp, lab = _cc(g, directed=False)
    # renumber in raster order of first pixel for determinism
    first = np.full(ncomp, n, dtype=np.int64)
    np.minimum.at(first, lab, np.arange(n))
    rank = np.empty(ncomp, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(ncomp)
    labels[mask] = rank[lab]
    return labels, ncomp


def _depth_links(buffer: RasterBuffer, eta: float) -> tuple[NDArray, NDArray]:
    tagged = buffer.tag != NONE
    d = buffer.depth
    scale = np.abs(d[tagged]).max() if tagged.any() else 1.0
    thr = eta + DEPTH_TOL * max(scale, 1.0)
    with np.errstate(invalid="ignore"):
        ok_h = tagged[:, :-1] & tagged[:, 1:] & (np.abs(d[:, :-1] - d[:, 1:]) <= thr)
        ok_v = tagged[:-1, :] & tagged[1:, :] & (np.abs(d[:-1, :] - d[1:, :]) <= thr)
    return ok_h, ok_v


@dataclass
class RegionLabels:
    labels: NDArray[np.int64]  # (H, W), -1 outside
    count: int

    def regions(self) -> list[NDArray[np.int64]]:
        """Flat pixel indices of each region, in label order."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        sorted_lab = flat[order]
        start = np.searchsorted(sorted_lab, np.arange(self.count))
        stop = np.searchsorted(sorted_lab, np.arange(self.count), side="right")
        return [order[a:b] for a, b in zip(start, stop)]


def connected_regions(buffer: RasterBuffer, eta: float) -> RegionLabels:
    """Flood fill over 4-connected tagged pixels whose depths differ by at most ``eta``."""
    ok_h, ok_v = _depth_links(buffer, eta)
    labels, n = _label(buffer.tag != NONE, ok_h, ok_v)
    return RegionLabels(labels, n)


@dataclass
class SubRegion:
    pixels: NDArray[np.int64]  # flat indices
    c1: int
    c2: int
    cb: int
    sign: int

    @property
    def score(self) -> int:
        return subregion_score(self)


def subregion_score(s: SubRegion) -> int:
    return int(s.cb) * int(s.c1) * int(s.c2)


def _subregion_labels(buffer: RasterBuffer, regions: RegionLabels) -> tuple[NDArray[np.int64], int]:
    lab = regions.labels
    s = buffer.sign
    ok_h = (lab[:, :-1] >= 0) & (lab[:, :-1] == lab[:, 1:]) & (s[:, :-1] == s[:, 1:])
    ok_v = (lab[:-1, :] >= 0) & (lab[:-1, :] == lab[1:, :]) & (s[:-1, :] == s[1:, :])
    return _label(lab >= 0, ok_h, ok_v)


def _subregion_counts(buffer: RasterBuffer, sub: NDArray, n: int) -> tuple[NDArray, NDArray, NDArray]:
    m = sub >= 0
    lab = sub[m]
    c1 = np.bincount(lab, weights=(buffer.tag[m] == B1), minlength=n).astype(np.int64)
    c2 = np.bincount(lab, weights=(buffer.tag[m] == B2), minlength=n).astype(np.int64)
    cb = np.bincount(lab, weights=buffer.boundary[m], minlength=n).astype(np.int64)
    return c1, c2, cb


def split_view_aligned(region: NDArray, buffer: RasterBuffer) -> list[SubRegion]:
    """Split one region (flat pixel indices) into maximal 4-connected same-sign pieces."""
    region = np.asarray(region, dtype=np.int64)
    mask = np.zeros(buffer.shape, dtype=bool)
    mask.ravel()[region] = True
    s = buffer.sign
    ok_h = mask[:, :-1] & mask[:, 1:] & (s[:, :-1] == s[:, 1:])
    ok_v = mask[:-1, :] & mask[1:, :] & (s[:-1, :] == s[1:, :])
    lab, n = _label(mask, ok_h, ok_v)
    c1, c2, cb = _subregion_counts(buffer, lab, n)
    flat = lab.ravel()
    out = []
    for k in range(n):
        px = np.nonzero(flat == k)[0]
        out.append(SubRegion(px, int(c1[k]), int(c2[k]), int(cb[k]), int(buffer.sign.ravel()[px[0]])))
    return out


def view_score(buffer: RasterBuffer, regions: RegionLabels) -> int:
    """Sum of piece scores over every region of one view."""
    sub, n = _subregion_labels(buffer, regions)
    if n == 0:
        return 0
    c1, c2, cb = _subregion_counts(buffer, sub, n)
    return int(sum(int(a) * int(b) * int(c) for a, b, c in zip(cb, c1, c2) if a and b and c))


@dataclass
class ConsistencyScores:
    alpha: float
    alpha_bar: float
    per_view: list[tuple[int, int]] = field(default_factory=list)


def pair_consistency(
    geometry: Geometry,
    views: list[ViewConfig] | None = None,
    resolution: int = 400,
    debug_dir: str | Path | None = None,
) -> ConsistencyScores:
    """(alpha, alpha_bar): the score as given and with block 2 flipped, over all views."""
    if views is None:
        pts = geometry.splat_centers if geometry.splat_centers is not None else geometry.triangles.reshape(-1, 3)
        views = dodecahedron_views(pts, None, resolution)
    alpha = 0
    alpha_bar = 0
    per_view = []
    for vi, view in enumerate(views):
        buf = rasterize_pair(geometry, view)
        if not buf.boundary.any():
            per_view.append((0, 0))
            continue
        eta = compute_eta(geometry, view)
        regions = connected_regions(buf, eta)
        a = view_score(buf, regions)
        ab = view_score(buf.with_block2_negated(), regions)
        per_view.append((a, ab))
        alpha += a
        alpha_bar += ab
        if debug_dir is not None:
            dump_view(Path(debug_dir), vi, buf, regions, eta, a, ab)
    return ConsistencyScores(float(alpha), float(alpha_bar), per_view)


def geometry_for_pair(points1, normals1, points2, normals2, mesh1=None, mesh2=None, spacing1=None, spacing2=None) -> Geometry:
    if mesh1 is not None and mesh2 is not None and len(mesh1) and len(mesh2):
        return mesh_geometry(mesh1, mesh2)
    return splat_geometry(points1, normals1, points2, normals2, spacing1, spacing2)


def write_pgm(path: Path, img: NDArray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def dump_view(out: Path, view_index: int, buf: RasterBuffer, regions: RegionLabels, eta: float, a: int, ab: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tag_img = np.choose(buf.tag, [0, 110, 220]).astype(np.uint8)
    sign_img = np.where(buf.tag == NONE, 0, np.where(buf.sign > 0, 255, 128)).astype(np.uint8)
    finite = np.isfinite(buf.depth)
    depth_img = np.zeros(buf.shape, dtype=np.uint8)
    if finite.any():
        d = buf.depth[finite]
        span = max(d.max() - d.min(), 1e-12)
        depth_img[finite] = (255 - 200 * (d - d.min()) / span).astype(np.uint8)
    write_pgm(out / f"view{view_index:02d}_tag.pgm", tag_img)
    write_pgm(out / f"view{view_index:02d}_sign.pgm", sign_img)
    write_pgm(out / f"view{view_index:02d}_depth.pgm", depth_img)
    write_pgm(out / f"view{view_index:02d}_boundary.pgm", (buf.boundary * 255).astype(np.uint8))
    with open(out / f"view{view_index:02d}_regions.txt", "w") as fh:
        fh.write(f"eta {eta!r}\nregions {regions.count}\nalpha {a}\nalpha_bar {ab}\n")
        fh.write("region pixels c1 c2 boundary\n")
        flat = regions.labels.ravel()
        tags = buf.tag.ravel()
        bnd = buf.boundary.ravel()
        m = flat >= 0
        n = regions.count
        px = np.bincount(flat[m], minlength=n)
        c1 = np.bincount(flat[m], weights=tags[m] == B1, minlength=n).astype(int)
        c2 = np.bincount(flat[m], weights=tags[m] == B2, minlength=n).astype(int)
        cb = np.bincount(flat[m], weights=bnd[m], minlength=n).astype(int)
        for k in range(n):
            fh.write(f"{k} {px[k]} {c1[k]} {c2[k]} {cb[k]}\n")
