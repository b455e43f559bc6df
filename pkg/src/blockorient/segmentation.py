"""Split a connected cloud into spatially connected blocks of similar size."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import KnnGraph, PointCloud, connected_components


class SegmentationError(ValueError):
    pass


@dataclass
class Block:
    id: int
    members: NDArray[np.int64]

    def __post_init__(self) -> None:
        self.members = np.asarray(self.members, dtype=np.int64)
        if len(self.members) == 0:
            raise ValueError(f"block {self.id} is empty")

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class Segmentation:
    blocks: list[Block]
    n_points: int
    target_count: int = 200

    def labels(self) -> NDArray[np.int64]:
        lab = np.full(self.n_points, -1, dtype=np.int64)
        for b in self.blocks:
            lab[b.members] = b.id
        return lab

    @classmethod
    def from_labels(cls, labels: NDArray, target_count: int | None = None) -> Segmentation:
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.unique(labels[labels >= 0])
        blocks = [Block(int(i), np.nonzero(labels == i)[0]) for i in ids]
        return cls(blocks, len(labels), target_count or len(blocks))

    def check_partition(self) -> None:
        counts = np.zeros(self.n_points, dtype=np.int64)
        for b in self.blocks:
            np.add.at(counts, b.members, 1)
        if np.any(counts != 1):
            bad = int(np.sum(counts != 1))
            raise SegmentationError(f"{bad} points are not covered exactly once")


def kd_partition(cloud: PointCloud | NDArray, target_count: int) -> list[NDArray[np.int64]]:
    """Recursive median split along the widest bounding-box axis.

    A node holding ``m`` points destined for ``c`` subsets sends
    ``round(m * floor(c/2) / c)`` points to the lower half, so sizes stay
    within one point of ``n / target_count``.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if target_count > n:
        raise ValueError(f"cannot split {n} points into {target_count} subsets")

    out: list[NDArray[np.int64]] = []
    stack = [(np.arange(n, dtype=np.int64), target_count)]
    while stack:
        idx, c = stack.pop()
        if c == 1:
            out.append(np.sort(idx))
            continue
        sub = pts[idx]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        c_lo = c // 2
        n_lo = int(round(len(idx) * c_lo / c))
        order = np.lexsort((idx, sub[:, axis]))
        # push upper first so lower subsets come out first
        stack.append((idx[order[n_lo:]], c - c_lo))
        stack.append((idx[order[:n_lo]], c_lo))
    return out


def grow_blocks(
    cloud: PointCloud | NDArray,
    subsets: list[NDArray],
    graph: KnnGraph,
    target_count: int | None = None,
) -> Segmentation:
    """Round-synchronous multi-source BFS from one seed per subset.

    The seed is the subset member closest to the subset centroid. When several
    fronts reach a point in the same round, the lowest block id wins.
    """
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    comps = connected_components(graph)
    if len(comps) != 1:
        sizes = ", ".join(str(len(c)) for c in comps[:10])
        raise SegmentationError(f"cloud is not connected: {len(comps)} components (sizes {sizes})")

    seeds = []
    for s in subsets:
        s = np.asarray(s, dtype=np.int64)
        if len(s) == 0:
            continue
        d = np.linalg.norm(pts[s] - pts[s].mean(axis=0), axis=1)
        seeds.append(int(s[np.lexsort((s, d))[0]]))

    labels = np.full(n, -1, dtype=np.int64)
    labels[seeds] = np.arange(len(seeds))
    frontier = np.array(seeds, dtype=np.int64)
    deg = graph.degree()
    while len(frontier):
        d = deg[frontier]
        src = np.repeat(frontier, d)
        starts = np.repeat(graph.indptr[frontier], d)
        offs = np.arange(d.sum()) - np.repeat(np.cumsum(d) - d, d)
        dst = graph.indices[starts + offs]
        free = labels[dst] < 0
        src, dst = src[free], dst[free]
        if len(dst) == 0:
            break
        claim = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(claim, dst, labels[src])
        frontier = np.unique(dst)
        labels[frontier] = claim[frontier]

    used = np.unique(labels)
    remap = np.full(len(seeds), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    labels = remap[labels]
    seg = Segmentation.from_labels(labels, target_count or len(subsets))
    seg.check_partition()
    return seg


def block_adjacency(seg: Segmentation | NDArray, graph: KnnGraph) -> list[tuple[int, int]]:
    labels = seg.labels() if isinstance(seg, Segmentation) else np.asarray(seg)
    e = graph.edges()
    if len(e) == 0:
        return []
    a, b = labels[e[:, 0]], labels[e[:, 1]]
    cross = (a != b) & (a >= 0) & (b >= 0)
    pairs = np.sort(np.stack([a[cross], b[cross]], axis=1), axis=1)
    if len(pairs) == 0:
        return []
    pairs = np.unique(pairs, axis=0)
    return [(int(i), int(j)) for i, j in pairs]


def write_labels(path: str | Path, labels: NDArray) -> None:
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def read_labels(path: str | Path) -> NDArray[np.int64]:
    return np.atleast_1d(np.loadtxt(path, dtype=np.int64))
