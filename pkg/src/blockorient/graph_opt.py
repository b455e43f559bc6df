"""Block flip states by 0-1 optimisation over the block adjacency graph.

Edge weights normalise the raw consistency scores. Up to a constant the
objective is a signed max-cut: cutting edge (i, j) gains
``delta_ij = w_ij(0,1) - w_ij(0,0)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6


class GraphError(ValueError):
    pass


@dataclass
class BlockGraph:
    n: int
    edges: list[tuple[int, int, float, float]] = field(default_factory=list)
    epsilon: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise GraphError("epsilon must be positive")
        canon = {}
        for i, j, a, ab in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self edge on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) out of range for {self.n} nodes")
            if a < 0 or ab < 0:
                raise GraphError(f"negative score on edge ({i}, {j})")
            if i > j:
                i, j = j, i
            if (i, j) in canon:
                raise GraphError(f"duplicate edge ({i}, {j})")
            canon[(i, j)] = (float(a), float(ab))
        self.edges = [(i, j, a, ab) for (i, j), (a, ab) in sorted(canon.items())]

    def arrays(self) -> tuple[NDArray, NDArray, NDArray, NDArray]:
        if not self.edges:
            z = np.zeros(0)
            return z.astype(np.int64), z.astype(np.int64), z, z
        e = np.asarray(self.edges, dtype=np.float64)
        return e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2], e[:, 3]

    def weights(self) -> tuple[NDArray, NDArray]:
        """(w_same, w_diff) per edge."""
        _, _, a, ab = self.arrays()
        den = a + ab + self.epsilon
        return a / den, ab / den

    def deltas(self) -> NDArray[np.float64]:
        ws, wd = self.weights()
        return wd - ws


@dataclass
class FlipAssignment:
    bits: NDArray[np.int8]
    objective: float
    optimal: bool = False
    upper_bound: float | None = None


def edge_weight(alpha: float, alpha_bar: float, epsilon: float = DEFAULT_EPS, same_state: bool = True) -> float:
    if alpha < 0 or alpha_bar < 0:
        raise ValueError("scores must be non-negative")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return (alpha if same_state else alpha_bar) / (alpha + alpha_bar + epsilon)


def objective(graph: BlockGraph, bits) -> float:
    o = np.asarray(bits, dtype=np.int64)
    if o.shape != (graph.n,):
        raise GraphError(f"assignment has length {len(o)}, graph has {graph.n} nodes")
    i, j, _, _ = graph.arrays()
    if len(i) == 0:
        return 0.0
    ws, wd = graph.weights()
    x = (o[i] - o[j]) ** 2
    return float(np.sum(x * wd + (1 - x) * ws))


def _adjacency(graph: BlockGraph) -> list[list[tuple[int, float]]]:
    adj: list[list[tuple[int, float]]] = [[] for _ in range(graph.n)]
    i, j, _, _ = graph.arrays()
    for a, b, d in zip(i, j, graph.deltas()):
        adj[a].append((int(b), float(d)))
        adj[b].append((int(a), float(d)))
    return adj


def graph_components(graph: BlockGraph) -> list[list[int]]:
    adj = _adjacency(graph)
    seen = [False] * graph.n
    comps = []
    for s in range(graph.n):
        if seen[s]:
            continue
        seen[s] = True
        comp, stack = [], [s]
        while stack:
            u = stack.pop()
            comp.append(u)
            for v, _ in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def root_bound(graph: BlockGraph) -> float:
    """Upper bound on the objective before branching: constant plus every positive cut gain."""
    ws, _ = graph.weights()
    return float(ws.sum() + np.clip(graph.deltas(), 0, None).sum())


def solve_exact(graph: BlockGraph, exact_limit: int = 28, incumbent: NDArray | None = None) -> FlipAssignment:
    """Globally optimal flips by depth-first branch and bound (node 0 is fixed unflipped).

    Nodes are assigned in BFS order of decreasing degree. At a node, the bound
    adds to the value fixed so far the better of the two states for every
    free node against its fixed neighbours, plus all positive gains on edges
    between free nodes.
    """
    n = graph.n
    if n > exact_limit:
        raise GraphError(f"{n} nodes exceeds exact_limit={exact_limit}; use solve_heuristic")
    if n == 0:
        return FlipAssignment(np.zeros(0, np.int8), 0.0, True, 0.0)
    ws, _ = graph.weights()
    const = float(ws.sum())
    adj = _adjacency(graph)
    order = _branch_order(adj, n)
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    # gains to earlier-ordered neighbours, and positive gains to later ones
    back = [[(int(pos[v]), d) for v, d in adj[u] if pos[v] < pos[u]] for u in order]
    fwd = np.array([sum(max(d, 0.0) for v, d in adj[u] if pos[v] > pos[u]) for u in order])
    # free_free[t]: positive gains on edges with both endpoints at position >= t
    free_free = np.concatenate([np.cumsum(fwd[::-1])[::-1], [0.0]])

    best_val = -np.inf
    best = np.zeros(n, dtype=np.int8)
    if incumbent is not None:
        inc = np.asarray(incumbent, dtype=np.int8)
        best_val = objective(graph, inc) - const
        best = inc[order] ^ inc[order[0]]
    x = np.zeros(n, dtype=np.int8)

    def bound_tail(t: int, value: float) -> float:
        # each free node picks its better side against fixed nodes
        extra = 0.0
        for s in range(t, n):
            g0 = g1 = 0.0
            for p, d in back[s]:
                if p < t:
                    if x[p]:
                        g0 += d
                    else:
                        g1 += d
            extra += max(g0, g1)
        return value + extra + free_free[t]

    def rec(t: int, value: float) -> None:
        nonlocal best_val, best
        if t == n:
            if value > best_val + 1e-12:
                best_val = value
                best = x.copy()
            return
        if bound_tail(t, value) <= best_val + 1e-12:
            return
        gains = [0.0, 0.0]
        for p, d in back[t]:
            if x[p]:
                gains[0] += d
            else:
                gains[1] += d
        choices = (0, 1) if t else (0,)
        if t and gains[1] > gains[0]:
            choices = (1, 0)
        for c in choices:
            x[t] = c
            rec(t + 1, value + gains[c])
        x[t] = 0

    rec(0, 0.0)
    bits = np.zeros(n, dtype=np.int8)
    bits[order] = best
    if bits[0]:
        bits ^= 1
    return FlipAssignment(bits, objective(graph, bits), True, root_bound(graph))


def _branch_order(adj, n: int) -> list[int]:
    deg = [len(a) for a in adj]
    seen = [False] * n
    order: list[int] = []
    starts = [0] + sorted(range(1, n), key=lambda u: (-deg[u], u))
    for s in starts:
        if seen[s]:
            continue
        seen[s] = True
        queue = [s]
        while queue:
            u = queue.pop(0)
            order.append(u)
            for v in sorted((v for v, _ in adj[u]), key=lambda v: (-deg[v], v)):
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return order


def _local_search(n: int, nbr, dlt, x: NDArray[np.int8]) -> NDArray[np.int8]:
    """Steepest single-flip ascent to a local optimum."""
    sgn = 1 - 2 * x.astype(np.float64)
    # gain of flipping u: sum_d d * (1 if currently uncut else -1)
    gain = np.zeros(n)
    for u in range(n):
        if len(nbr[u]):
            same = sgn[nbr[u]] == sgn[u]
            gain[u] = np.sum(np.where(same, dlt[u], -dlt[u]))
    while True:
        u = int(np.argmax(gain))
        if gain[u] <= 1e-12:
            return x
        x[u] ^= 1
        sgn[u] = -sgn[u]
        gain[u] = -gain[u]
        for v, d in zip(nbr[u], dlt[u]):
            # edge (u, v) toggled: uncut now contributes +d to v's gain, cut -d
            gain[v] += 2 * d if sgn[v] == sgn[u] else -2 * d


def solve_heuristic(graph: BlockGraph, restarts: int = 32, rng_seed: int = 0) -> FlipAssignment:
    """Best of ``restarts`` steepest-ascent runs; the first start is all zeros."""
    n = graph.n
    if n < 1:
        raise GraphError("graph has no nodes")
    adj = _adjacency(graph)
    nbr = [np.array([v for v, _ in a], dtype=np.int64) for a in adj]
    dlt = [np.array([d for _, d in a], dtype=np.float64) for a in adj]
    seqs = np.random.SeedSequence(rng_seed).spawn(max(restarts, 1))
    best_bits, best_val = None, -np.inf
    for r, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        x = np.zeros(n, dtype=np.int8) if r == 0 else rng.integers(0, 2, n).astype(np.int8)
        x = _local_search(n, nbr, dlt, x)
        if x[0]:
            x ^= 1
        val = objective(graph, x)
        if val > best_val + 1e-12:
            best_val, best_bits = val, x.copy()
    return FlipAssignment(best_bits, best_val, False, root_bound(graph))


def solve(graph: BlockGraph, exact_limit: int = 28, restarts: int = 32, rng_seed: int = 0) -> FlipAssignment:
    """Per connected component: exact when small enough, otherwise local search."""
    comps = graph_components(graph)
    if len(comps) > 1:
        log.warning("block graph has %d components; solving each independently", len(comps))
    bits = np.zeros(graph.n, dtype=np.int8)
    all_exact = True
    for comp in comps:
        if len(comp) == 1:
            continue
        sub = _subgraph(graph, comp)
        if sub.n <= exact_limit:
            inc = solve_heuristic(sub, min(restarts, 8), rng_seed).bits
            res = solve_exact(sub, exact_limit, incumbent=inc)
        else:
            res = solve_heuristic(sub, restarts, rng_seed)
            all_exact = False
        bits[comp] = res.bits
    return FlipAssignment(bits, objective(graph, bits), all_exact, root_bound(graph))


def _subgraph(graph: BlockGraph, nodes: list[int]) -> BlockGraph:
    local = {u: k for k, u in enumerate(nodes)}
    edges = [(local[i], local[j], a, ab) for i, j, a, ab in graph.edges if i in local and j in local]
    return BlockGraph(len(nodes), edges, graph.epsilon)


def apply_flips(normals: NDArray, labels: NDArray, bits: NDArray) -> NDArray[np.float64]:
    """Negate the normals of every point whose block is flipped."""
    normals = np.asarray(normals, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = np.asarray(bits, dtype=bool)
    flip = np.zeros(len(labels), dtype=bool)
    ok = labels >= 0
    flip[ok] = b[labels[ok]]
    return np.where(flip[:, None], -normals, normals)


def write_graph(path: str | Path, graph: BlockGraph) -> None:
    with open(path, "w") as fh:
        fh.write(f"{graph.n} {graph.epsilon!r}\n")
        for i, j, a, ab in graph.edges:
            fh.write(f"{i} {j} {a!r} {ab!r}\n")


def read_graph(path: str | Path) -> BlockGraph:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise GraphError(f"{path}: empty graph file")
    try:
        n, eps = int(lines[0][0]), float(lines[0][1])
    except (IndexError, ValueError) as exc:
        raise GraphError(f"{path}: line 1: header must be 'N epsilon'") from exc
    edges = []
    for k, tok in enumerate(lines[1:], start=2):
        try:
            edges.append((int(tok[0]), int(tok[1]), float(tok[2]), float(tok[3])))
        except (IndexError, ValueError) as exc:
            raise GraphError(f"{path}: line {k}: expected 'i j alpha alpha_bar'") from exc
    return BlockGraph(n, edges, eps)
