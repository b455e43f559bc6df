"""Per-block orientation initialisation with a generalised dipole field.

Each pass walks the block's kNN graph breadth-first from a random seed and
fixes one sign per point so that the field of the already-oriented points
agrees with it. Several passes are aligned by an exhaustive search over
global flips and combined by majority vote.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .geometry import KnnGraph

log = logging.getLogger(__name__)

COINCIDENT_TOL = 1e-12


class CoincidentPointsError(ValueError):
    pass


@dataclass(frozen=True)
class DipoleParams:
    c: float = 4.0
    passes: int = 5
    rng_seed: int = 0
    k_field: int = 16
    k_candidates: int = 48
    exact: bool = False

    def __post_init__(self) -> None:
        if not self.c > 1:
            raise ValueError("field exponent c must be > 1")
        if self.passes < 1:
            raise ValueError("need at least one pass")
        if self.k_field < 1:
            raise ValueError("k_field must be >= 1")


@dataclass
class OrientationPass:
    flips: NDArray[np.bool_]
    visit_order: NDArray[np.int64]
    scores: NDArray[np.float64] | None = None


def dipole_field(p, n, p_target, c: float) -> NDArray[np.float64]:
    """Field at ``p_target`` of a source at ``p`` with normal ``n``: -(c r r^T - I) n / |r|^3."""
    if not c > 1:
        raise ValueError("c must be > 1")
    p, n, q = (np.asarray(a, dtype=np.float64) for a in (p, n, p_target))
    r = q - p
    dist = np.linalg.norm(r)
    if dist < COINCIDENT_TOL:
        raise CoincidentPointsError("source and target coincide")
    rh = r / dist
    return -(c * rh * np.dot(rh, n) - n) / dist**3


def interaction(p, n, p_target, n_target, c: float) -> float:
    """Influence of the field of ``(p, n)`` on the normal at ``p_target``. Not symmetric."""
    return float(np.dot(dipole_field(p, n, p_target, c), np.asarray(n_target, dtype=np.float64)))


def interaction_many(src_p, src_n, dst_p, dst_n, c: float) -> NDArray[np.float64]:
    """Vectorised :func:`interaction`; coincident pairs yield 0."""
    r = dst_p - src_p
    dist = np.linalg.norm(r, axis=-1)
    ok = dist >= COINCIDENT_TOL
    safe = np.where(ok, dist, 1.0)
    rh = r / safe[..., None]
    rn = np.sum(rh * src_n, axis=-1)
    rn2 = np.sum(rh * dst_n, axis=-1)
    nn = np.sum(src_n * dst_n, axis=-1)
    e = -(c * rn * rn2 - nn) / safe**3
    return np.where(ok, e, 0.0)


@njit(cache=True)
def _greedy_kernel(order, cand, E, limit, skip):
    n = order.shape[0]
    rank = np.empty(n, dtype=np.int64)
    for t in range(n):
        rank[order[t]] = t
    sign = np.ones(n, dtype=np.int8)
    score = np.zeros(n, dtype=np.float64)
    for t in range(1, n):
        j = order[t]
        if skip[j]:
            continue
        s = 0.0
        used = 0
        for c in range(cand.shape[1]):
            i = cand[j, c]
            if i < 0:
                break
            if rank[i] < t and not skip[i]:
                s += sign[i] * E[j, c]
                used += 1
                if used >= limit:
                    break
        score[j] = s
        if s < 0.0:
            sign[j] = -1
    return sign, score


def _bfs_order(graph: KnnGraph, seed: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """BFS from ``seed``; each level is visited in a random order."""
    n = graph.n
    seen = np.zeros(n, dtype=bool)
    seen[seed] = True
    level = np.array([seed], dtype=np.int64)
    out = [level]
    deg = graph.degree()
    while True:
        d = deg[level]
        starts = np.repeat(graph.indptr[level], d)
        offs = np.arange(d.sum()) - np.repeat(np.cumsum(d) - d, d)
        nxt = np.unique(graph.indices[starts + offs])
        nxt = nxt[~seen[nxt]]
        if len(nxt) == 0:
            break
        seen[nxt] = True
        level = rng.permutation(nxt)
        out.append(level)
    order = np.concatenate(out)
    if len(order) < n:
        # unreachable points (should not happen for grown blocks) go last
        rest = np.nonzero(~seen)[0]
        order = np.concatenate([order, rng.permutation(rest)])
    return order


class BlockField:
    """Precomputed candidate predecessors and pairwise interactions for one block.

    ``E[j, c]`` is the interaction of candidate ``cand[j, c]`` on point ``j``
    with both normals at their PCA sign. Candidates are sorted by distance.
    """

    def __init__(self, points, normals, degenerate, params: DipoleParams):
        self.c = params.c
        self.points = np.asarray(points, dtype=np.float64)
        self.normals = np.asarray(normals, dtype=np.float64)
        n = len(self.points)
        self.degenerate = np.zeros(n, dtype=bool) if degenerate is None else np.asarray(degenerate, bool)
        if params.exact:
            d = np.linalg.norm(self.points[:, None] - self.points[None], axis=2)
            np.fill_diagonal(d, np.inf)
            cand = np.argsort(d, axis=1, kind="stable")[:, : n - 1]
            self.limit = max(n, 1)
        else:
            kc = min(params.k_candidates, n - 1)
            if kc >= 1:
                _, cand = cKDTree(self.points).query(self.points, k=kc + 1)
                cand = np.asarray(cand, dtype=np.int64).reshape(n, -1)
                # drop self wherever it landed
                keep = cand != np.arange(n)[:, None]
                cand = np.array([row[k][:kc] for row, k in zip(cand, keep)], dtype=np.int64).reshape(n, kc)
            else:
                cand = np.empty((n, 0), dtype=np.int64)
            self.limit = params.k_field
        self.cand = np.ascontiguousarray(cand, dtype=np.int64)
        if self.cand.shape[1]:
            E = interaction_many(
                self.points[self.cand], self.normals[self.cand],
                self.points[:, None, :], self.normals[:, None, :], params.c,
            )
            E[self.degenerate[self.cand]] = 0.0
        else:
            E = np.empty((n, 0))
        self.E = np.ascontiguousarray(E)


def greedy_pass(
    graph: KnnGraph,
    field: BlockField,
    rng: np.random.Generator,
    seed: int | None = None,
) -> OrientationPass:
    """One randomised greedy pass over a block (``graph`` uses block-local indices)."""
    n = graph.n
    if seed is None:
        seed = int(rng.integers(n))
    order = _bfs_order(graph, seed, rng)
    skip = field.degenerate.copy()
    sign, score = _greedy_kernel(order, field.cand, field.E, field.limit, skip)
    sign[order[0]] = 1
    flips = sign < 0
    if skip.any():
        _orient_degenerate(field, flips)
    return OrientationPass(flips, order, score)


def _orient_degenerate(field: BlockField, flips: NDArray[np.bool_]) -> None:
    good = np.nonzero(~field.degenerate)[0]
    bad = np.nonzero(field.degenerate)[0]
    if len(good) == 0:
        return
    _, nearest = cKDTree(field.points[good]).query(field.points[bad])
    src = good[np.atleast_1d(nearest)]
    src_n = np.where(flips[src, None], -1.0, 1.0) * field.normals[src]
    e = interaction_many(field.points[src], src_n, field.points[bad], field.normals[bad], field.c)
    flips[bad] = e < 0


def align_passes(passes: NDArray[np.bool_]) -> tuple[NDArray[np.bool_], int]:
    """Global flip per pass maximising total pairwise agreement; the first pass is never flipped.

    Returns ``(g, agreement)``.
    """
    P = np.asarray(passes, dtype=bool)
    M, n = P.shape
    agree = (P[:, None, :] == P[None, :, :]).sum(axis=2)
    best_g, best = np.zeros(M, dtype=bool), -1
    iu = np.triu_indices(M, 1)
    for bits in itertools.product((False, True), repeat=M - 1):
        g = np.array((False,) + bits)
        same = g[:, None] == g[None, :]
        tot = int(np.where(same, agree, n - agree)[iu].sum())
        if tot > best:
            best, best_g = tot, g
    return best_g, max(best, 0)


def align_and_vote(passes: list[OrientationPass] | NDArray) -> NDArray[np.bool_]:
    P = np.asarray([p.flips if isinstance(p, OrientationPass) else p for p in passes], dtype=bool)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("need at least one pass")
    g, _ = align_passes(P)
    aligned = P ^ g[:, None]
    votes = aligned.sum(axis=0) * 2
    M = len(P)
    out = votes > M
    tie = votes == M
    out[tie] = aligned[0, tie]
    return out


def orient_block_initial(
    points: NDArray,
    normals: NDArray,
    graph: KnnGraph,
    params: DipoleParams = DipoleParams(),
    degenerate: NDArray | None = None,
) -> NDArray[np.float64]:
    """Orient one block's PCA normals. ``graph`` is the block-local kNN subgraph."""
    normals = np.asarray(normals, dtype=np.float64)
    n = len(normals)
    if degenerate is not None and np.all(degenerate):
        log.warning("block of %d points has only degenerate normals; left unchanged", n)
        return normals.copy()
    if n == 1:
        return normals.copy()
    field = BlockField(points, normals, degenerate, params)
    seqs = np.random.SeedSequence(params.rng_seed).spawn(params.passes)
    passes = [greedy_pass(graph, field, np.random.default_rng(s)) for s in seqs]
    flips = align_and_vote(passes)
    return np.where(flips[:, None], -normals, normals)
