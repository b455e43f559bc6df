"""Iterative per-block normal refinement against a pluggable surface reconstructor.

Each iteration reconstructs a mesh from the current oriented normals, maps
every face to its nearest input points and replaces each point normal by the
area-weighted mean of the normals of the faces mapped to it. Faces grown past
the open boundary of a block are trimmed during the last iterations.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import plyio
from .geometry import exact_knn, normalize_rows

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    pass


@dataclass
class TriangleMesh:
    vertices: NDArray[np.float64]
    faces: NDArray[np.int64]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        self.areas = 0.5 * norm
        self.face_normals = cross / np.where(norm > 0, norm, 1.0)[:, None]

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def centroids(self) -> NDArray[np.float64]:
        return self.vertices[self.faces].mean(axis=1)

    def select(self, keep: NDArray) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces[np.asarray(keep)])

    def flipped(self, mask: NDArray | None = None) -> TriangleMesh:
        f = self.faces.copy()
        m = slice(None) if mask is None else np.asarray(mask, dtype=bool)
        f[m] = f[m][:, [0, 2, 1]]
        return TriangleMesh(self.vertices, f)

    def boundary_faces(self) -> NDArray[np.bool_]:
        """Faces owning at least one edge that no other face shares."""
        if len(self.faces) == 0:
            return np.zeros(0, dtype=bool)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, inv, cnt = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        open_edge = cnt[inv.ravel()] == 1
        return open_edge.reshape(3, -1).any(axis=0)


Reconstructor = Callable[[NDArray, NDArray], TriangleMesh]


@dataclass
class RefineConfig:
    max_iters: int = 20
    k_map: int = 10
    convergence_tol: float = 0.5
    trim_start_iter: int | None = None
    distance_factor: float = 3.0
    reconstructor: Union[str, Reconstructor] = "smoothing"
    external_cmd: str | None = None
    external_timeout: float = 300.0
    crust_k: int = 10

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.k_map < 1:
            raise ValueError("k_map must be >= 1")
        if self.trim_start_iter is None:
            self.trim_start_iter = max(self.max_iters - 3, 0)


_external_slots = threading.BoundedSemaphore(4)


def set_external_concurrency(n: int) -> None:
    """Cap on simultaneously running external reconstructor processes."""
    global _external_slots
    _external_slots = threading.BoundedSemaphore(max(1, int(n)))


def crust_mesh(points: NDArray, normals: NDArray, k: int = 10, neighbors: NDArray | None = None) -> TriangleMesh:
    """Union of local umbrella fans built in each point's tangent plane.

    Neighbours are sorted by angle around the centre point and consecutive
    pairs closing an angle below 120 degrees form a triangle with it. Winding
    follows the sum of the three vertex normals. There is no implicit solve;
    the mesh only serves as a source of oriented faces.
    """
    pts = np.asarray(points, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot reconstruct from zero points")
    if n < 3:
        raise ReconstructionError(f"need at least 3 points, got {n}")
    if neighbors is None:
        neighbors, _ = exact_knn(pts, min(k, n - 1))
    kk = neighbors.shape[1]
    # tangent basis per point
    helper = np.where(np.abs(nrm[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = normalize_rows(np.cross(nrm, helper))
    v = np.cross(nrm, u)
    rel = pts[neighbors] - pts[:, None, :]
    ang = np.arctan2(np.einsum("nkd,nd->nk", rel, v), np.einsum("nkd,nd->nk", rel, u))
    order = np.argsort(ang, axis=1, kind="stable")
    nb = np.take_along_axis(neighbors, order, axis=1)
    a = np.take_along_axis(ang, order, axis=1)
    nxt = np.roll(nb, -1, axis=1)
    gap = np.roll(a, -1, axis=1) - a
    gap[:, -1] += 2 * np.pi
    ok = (gap > 1e-9) & (gap < 2 * np.pi / 3)
    if kk < 2:
        ok[:] = False
    ci = np.repeat(np.arange(n)[:, None], kk, axis=1)
    tris = np.stack([ci[ok], nb[ok], nxt[ok]], axis=1)
    if len(tris) == 0:
        raise ReconstructionError("local triangulation produced no faces")
    key = np.sort(tris, axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    tris = tris[np.sort(first)]
    tri = pts[tris]
    g = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vote = nrm[tris].sum(axis=1)
    back = np.einsum("fd,fd->f", g, vote) < 0
    tris[back] = tris[back][:, [0, 2, 1]]
    return TriangleMesh(pts, tris)


def _external(points: NDArray, normals: NDArray, cmd: str, timeout: float) -> TriangleMesh:
    with tempfile.TemporaryDirectory(prefix="blockorient-") as tmp:
        src = Path(tmp) / "input.ply"
        dst = Path(tmp) / "output.ply"
        plyio.write_points_ply(src, points, normals)
        argv = [tok.format(input=str(src), output=str(dst)) for tok in shlex.split(cmd)]
        with _external_slots:
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=timeout, text=True)
            except subprocess.TimeoutExpired as exc:
                raise ReconstructionError(f"reconstructor timed out after {timeout}s: {argv[0]}") from exc
            except OSError as exc:
                raise ReconstructionError(f"cannot run reconstructor {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip()[-400:]
            raise ReconstructionError(f"reconstructor exited with status {proc.returncode}: {tail}")
        if not dst.exists():
            raise ReconstructionError("reconstructor wrote no output mesh")
        try:
            verts, faces = plyio.read_mesh(dst)
        except plyio.ParseError as exc:
            raise ReconstructionError(f"cannot parse reconstructor output: {exc}") from exc
    mesh = TriangleMesh(verts, faces)
    if len(mesh) == 0:
        raise ReconstructionError("reconstructor produced an empty mesh")
    return mesh


def reconstruct(points: NDArray, normals: NDArray | None, config: RefineConfig = RefineConfig()) -> TriangleMesh:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot reconstruct from zero points")
    if normals is None:
        raise ValueError("reconstruction needs oriented normals")
    strategy = config.reconstructor
    if callable(strategy):
        mesh = strategy(points, normals)
    elif strategy == "smoothing":
        mesh = crust_mesh(points, normals, config.crust_k)
    elif strategy == "external":
        if not config.external_cmd:
            raise ReconstructionError("external reconstructor selected but no command configured")
        mesh = _external(points, normals, config.external_cmd, config.external_timeout)
    else:
        raise ValueError(f"unknown reconstructor {strategy!r}")
    if len(mesh) == 0:
        raise ReconstructionError("empty mesh")
    return mesh


@dataclass
class FaceMap:
    """Face-to-point correspondences, one row per (point, face) pair."""

    n_points: int
    point: NDArray[np.int64]
    face: NDArray[np.int64]
    area: NDArray[np.float64]
    normal: NDArray[np.float64]

    def per_point(self) -> list[list[tuple[int, float, NDArray]]]:
        out: list[list] = [[] for _ in range(self.n_points)]
        for p, f, a, nv in zip(self.point, self.face, self.area, self.normal):
            out[p].append((int(f), float(a), nv))
        return out


def map_faces_to_points(mesh: TriangleMesh, points: NDArray, k_map: int = 10, tree: cKDTree | None = None) -> FaceMap:
    """Give each face's (area, normal) to the ``k_map`` input points nearest its centroid."""
    pts = np.asarray(points, dtype=np.float64)
    if len(mesh) == 0:
        raise ValueError("mesh is empty")
    k = min(k_map, len(pts))
    tree = tree if tree is not None else cKDTree(pts)
    _, idx = tree.query(mesh.centroids, k=k)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(mesh), k)
    faces = np.repeat(np.arange(len(mesh)), k)
    return FaceMap(len(pts), idx.ravel(), faces, mesh.areas[faces], mesh.face_normals[faces])


def update_normals(normals: NDArray, contributions: FaceMap) -> tuple[NDArray[np.float64], float]:
    """Area-weighted face normal average per point; returns ``(normals, mean_change_deg)``.

    Points without contributions, or whose weighted sum vanishes, keep their normal.
    """
    old = np.asarray(normals, dtype=np.float64)
    acc = np.zeros_like(old)
    weight = np.zeros(len(old))
    np.add.at(acc, contributions.point, contributions.area[:, None] * contributions.normal)
    np.add.at(weight, contributions.point, contributions.area)
    length = np.linalg.norm(acc, axis=1)
    upd = length > 1e-12 * np.maximum(weight, 1e-300)
    new = old.copy()
    new[upd] = acc[upd] / length[upd, None]
    if not upd.any():
        return new, 0.0
    cosang = np.clip(np.einsum("nd,nd->n", old[upd], new[upd]), -1.0, 1.0)
    return new, float(np.degrees(np.arccos(cosang)).mean())


def mean_spacing(points: NDArray, tree: cKDTree | None = None) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    tree = tree if tree is not None else cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    return float(d[:, 1].mean())


def trim_boundary_faces(
    mesh: TriangleMesh,
    points: NDArray,
    distance_factor: float = 3.0,
    spacing: float | None = None,
    tree: cKDTree | None = None,
) -> TriangleMesh:
    """Peel boundary faces whose centroid is farther than ``distance_factor * spacing`` from the input."""
    pts = np.asarray(points, dtype=np.float64)
    tree = tree if tree is not None else cKDTree(pts)
    spacing = mean_spacing(pts, tree) if spacing is None else spacing
    limit = distance_factor * spacing
    if len(mesh) == 0:
        return mesh
    dist, _ = tree.query(mesh.centroids)
    far = dist > limit
    alive = np.ones(len(mesh), dtype=bool)
    while True:
        current = mesh.select(alive)
        if len(current) == 0:
            break
        drop_local = current.boundary_faces() & far[alive]
        if not drop_local.any():
            break
        alive_idx = np.nonzero(alive)[0]
        alive[alive_idx[drop_local]] = False
    out = mesh.select(alive)
    if len(out) == 0:
        log.warning("boundary trimming removed every face")
    return out


@dataclass
class RefineResult:
    normals: NDArray[np.float64]
    iterations: int
    converged: bool
    mesh: TriangleMesh | None = None
    warnings: list[str] = field(default_factory=list)


def refine_block(points: NDArray, normals: NDArray, config: RefineConfig = RefineConfig()) -> RefineResult:
    """Run the reconstruct / map / update loop until the mean normal change drops below tolerance."""
    pts = np.asarray(points, dtype=np.float64)
    cur = np.asarray(normals, dtype=np.float64).copy()
    if len(pts) < 3:
        return RefineResult(cur, 0, True, None, ["block too small to refine"])
    tree = cKDTree(pts)
    spacing = mean_spacing(pts, tree)
    mesh = None
    it = 0
    converged = False
    for it in range(1, config.max_iters + 1):
        try:
            mesh = reconstruct(pts, cur, config)
        except (ReconstructionError, ValueError) as exc:
            msg = f"reconstruction failed at iteration {it}: {exc}"
            log.warning(msg)
            return RefineResult(np.asarray(normals, dtype=np.float64).copy(), it, False, None, [msg])
        if it - 1 >= config.trim_start_iter:
            mesh = trim_boundary_faces(mesh, pts, config.distance_factor, spacing, tree)
            if len(mesh) == 0:
                return RefineResult(cur, it, False, mesh, ["mesh fully trimmed"])
        fmap = map_faces_to_points(mesh, pts, config.k_map, tree)
        cur, change = update_normals(cur, fmap)
        if change < config.convergence_tol:
            converged = True
            break
    return RefineResult(cur, it, converged, mesh)
