"""Point cloud container, exact kNN graphs, PCA normals and graph components."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

UNIT_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Input too small or too degenerate for the requested operation."""


def normalize_rows(v: NDArray) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    n[n == 0] = 1.0
    return v / n


@dataclass
class PointCloud:
    positions: NDArray[np.float64]
    normals: NDArray[np.float64] | None = None
    gt_normals: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) == 0:
            raise ValueError("point cloud must be non-empty")
        for name in ("normals", "gt_normals"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1, 3)
            if len(arr) != len(self.positions):
                raise ValueError(f"{name} has {len(arr)} rows, positions has {len(self.positions)}")
            lengths = np.linalg.norm(arr, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_TOL):
                raise ValueError(f"{name} must be unit length")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx: NDArray) -> PointCloud:
        idx = np.asarray(idx)
        return PointCloud(
            self.positions[idx],
            None if self.normals is None else self.normals[idx],
            None if self.gt_normals is None else self.gt_normals[idx],
        )


@dataclass
class KnnGraph:
    """Adjacency in CSR layout: neighbors of ``i`` are ``indices[indptr[i]:indptr[i+1]]``."""

    k: int
    indptr: NDArray[np.int64]
    indices: NDArray[np.int64]
    mutual: bool = False
    _lists: list | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def neighbors(self, i: int) -> NDArray[np.int64]:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    @property
    def adjacency(self) -> list[NDArray[np.int64]]:
        if self._lists is None:
            self._lists = [self.neighbors(i) for i in range(self.n)]
        return self._lists

    def degree(self) -> NDArray[np.int64]:
        return np.diff(self.indptr)

    def edges(self) -> NDArray[np.int64]:
        """Unique undirected edges as an (E, 2) array with ``i < j``."""
        src = np.repeat(np.arange(self.n), self.degree())
        e = np.stack([src, self.indices], axis=1)
        e = np.sort(e, axis=1)
        e = e[e[:, 0] != e[:, 1]]
        return np.unique(e, axis=0) if len(e) else e.reshape(0, 2)

    def to_csr(self) -> csr_matrix:
        data = np.ones(len(self.indices), dtype=np.int8)
        return csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def subgraph(self, members: NDArray) -> KnnGraph:
        """Induced subgraph on ``members``, relabelled to 0..len(members)-1."""
        members = np.asarray(members, dtype=np.int64)
        local = np.full(self.n, -1, dtype=np.int64)
        local[members] = np.arange(len(members))
        deg = self.degree()[members]
        src = np.repeat(np.arange(len(members)), deg)
        starts = np.repeat(self.indptr[members], deg)
        offsets = np.arange(deg.sum()) - np.repeat(np.cumsum(deg) - deg, deg)
        dst = local[self.indices[starts + offsets]]
        keep = dst >= 0
        rows, cols = src[keep], dst[keep]
        counts = np.bincount(rows, minlength=len(members))
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return KnnGraph(self.k, indptr, cols.astype(np.int64), self.mutual)


def exact_knn(points: NDArray, k: int, tree: cKDTree | None = None) -> tuple[NDArray, NDArray]:
    """k nearest neighbours of every point, excluding itself.

    Ties in distance are broken by ascending index, so the result is fully
    determined by the input. Returns ``(indices, distances)``, both (n, k).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise DegenerateInputError(f"k={k} needs at least {k + 1} points, got {n}")
    tree = tree if tree is not None else cKDTree(pts)
    q = min(n, k + 5)
    d, idx = tree.query(pts, k=q)
    d = np.atleast_2d(d)
    idx = np.atleast_2d(idx)
    out_i = np.empty((n, k), dtype=np.int64)
    out_d = np.empty((n, k), dtype=np.float64)
    rows = np.arange(n)
    # drop self by index, not by position (duplicates may precede it)
    is_self = idx == rows[:, None]
    d = np.where(is_self, np.inf, d)
    order = np.lexsort((idx, d), axis=1)
    d_sorted = np.take_along_axis(d, order, axis=1)
    i_sorted = np.take_along_axis(idx, order, axis=1)
    out_i[:] = i_sorted[:, :k]
    out_d[:] = d_sorted[:, :k]
    # rows where the k-th distance reaches the edge of the query may hide ties
    finite_last = np.where(np.isfinite(d_sorted), d_sorted, -np.inf).max(axis=1)
    suspect = np.nonzero((q < n) & (out_d[:, -1] >= finite_last))[0]
    for r in suspect:
        cand = np.array(tree.query_ball_point(pts[r], out_d[r, -1] * (1 + 1e-12) + 1e-300), dtype=np.int64)
        cand = cand[cand != r]
        cd = np.linalg.norm(pts[cand] - pts[r], axis=1)
        o = np.lexsort((cand, cd))[:k]
        out_i[r] = cand[o]
        out_d[r] = cd[o]
    return out_i, out_d


def build_knn_graph(cloud: PointCloud | NDArray, k: int = 10, mutual: bool = True) -> KnnGraph:
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty cloud")
    nbr, _ = exact_knn(pts, k)
    n = len(pts)
    src = np.repeat(np.arange(n), k)
    dst = nbr.ravel()
    if mutual:
        m = csr_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
        m = m.multiply(m.T).tocsr()
    else:
        m = csr_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    m.sort_indices()
    return KnnGraph(k, m.indptr.astype(np.int64), m.indices.astype(np.int64), mutual)


def pca_normals(
    cloud: PointCloud | NDArray, k: int = 10, neighbors: NDArray | None = None
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Unsigned normals from the covariance of each point and its k neighbours.

    Returns ``(normals, degenerate)``. A neighbourhood is degenerate when its
    covariance has rank < 2; the normal is then any unit vector orthogonal
    to the dominant direction.
    """
    if k < 3:
        raise ValueError("PCA normals need k >= 3")
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if neighbors is None:
        kk = min(k, n - 1)
        if kk < 1:
            return np.tile([0.0, 0.0, 1.0], (n, 1)), np.ones(n, dtype=bool)
        neighbors, _ = exact_knn(pts, kk)
    hood = np.concatenate([pts[:, None, :], pts[neighbors]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = w[:, 1] <= 1e-12 * scale
    degenerate |= w[:, 2] <= 1e-300
    if np.any(degenerate):
        for i in np.nonzero(degenerate)[0]:
            normals[i] = _orthogonal_to(v[i, :, 2])
    return normalize_rows(normals), degenerate


def _orthogonal_to(d: NDArray) -> NDArray:
    d = np.asarray(d, dtype=np.float64)
    if not np.any(d):
        return np.array([0.0, 0.0, 1.0])
    axis = np.zeros(3)
    axis[np.argmin(np.abs(d))] = 1.0
    o = np.cross(d, axis)
    return o / np.linalg.norm(o)


def connected_components(graph: KnnGraph) -> list[NDArray[np.int64]]:
    """Maximal connected vertex sets, largest first (ties: smallest member first)."""
    ncomp, labels = _cc(graph.to_csr(), directed=True, connection="weak")
    comps = [np.nonzero(labels == c)[0] for c in range(ncomp)]
    comps.sort(key=lambda c: (-len(c), c[0]))
    return comps
