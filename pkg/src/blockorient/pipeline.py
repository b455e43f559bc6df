"""Batch pipeline: component extraction, segmentation, per-block orientation,
pairwise scoring, global flip solve, evaluation and artifact export."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import plyio
from .dipole import DipoleParams, orient_block_initial
from .geometry import KnnGraph, PointCloud, build_knn_graph, connected_components, exact_knn, pca_normals
from .graph_opt import BlockGraph, FlipAssignment, apply_flips, solve, write_graph
from .metrics import OrientationReport, chamfer, incorrect_ratio, write_report
from .refine import RefineConfig, TriangleMesh, refine_block, set_external_concurrency
from .segmentation import block_adjacency, grow_blocks, kd_partition, write_labels
from .vcr import dodecahedron_views, geometry_for_pair, local_spacing, pair_consistency

log = logging.getLogger(__name__)

WORKERS_ENV = "BLOCKORIENT_WORKERS"
MINOR_COMPONENT_FRACTION = 0.01


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and the message carries block or pair ids."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    input: str | None = None
    out_dir: str = "run"
    block_count: int = 200
    knn_k: int = 10
    c: float = 4.0
    passes: int = 5
    k_field: int = 16
    resolution: int = 400
    max_iters: int = 20
    k_map: int = 10
    convergence_tol: float = 0.5
    distance_factor: float = 3.0
    reconstructor: str = "smoothing"
    refine_cmd: str | None = None
    exact_limit: int = 28
    restarts: int = 32
    epsilon: float = 1e-6
    seed: int = 0
    reference: str | None = None
    figures: bool = True
    binary_output: bool = False
    debug_views: bool = False

    def __post_init__(self) -> None:
        if self.block_count < 1:
            raise ValueError("block_count must be >= 1")
        if self.knn_k < 3:
            raise ValueError("knn_k must be >= 3")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.refine_cmd and self.reconstructor == "smoothing":
            self.reconstructor = "external"

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            max_iters=self.max_iters,
            k_map=self.k_map,
            convergence_tol=self.convergence_tol,
            distance_factor=self.distance_factor,
            reconstructor=self.reconstructor,
            external_cmd=self.refine_cmd,
        )

    def dipole_params(self, block_id: int) -> DipoleParams:
        return DipoleParams(c=self.c, passes=self.passes, rng_seed=block_seed(self.seed, block_id), k_field=self.k_field)


def block_seed(seed: int, block_id: int) -> int:
    """Per-block seed that depends only on the run seed and block id, never on scheduling."""
    return int(np.random.SeedSequence([seed, block_id]).generate_state(1)[0])


def _coerce(value: str, default, name: str):
    v = value.strip()
    if v.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


def load_config(path: str | Path, **overrides) -> PipelineConfig:
    """``key = value`` lines (``#`` comments); keyword overrides win over file values."""
    defaults = PipelineConfig()
    known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(PipelineConfig)}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(val, known[key], key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
    return max(1, min(8, os.cpu_count() or 1))


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class Prepared:
    kept: NDArray[np.int64]  # indices into the input cloud
    cloud: PointCloud  # the kept points
    graph: KnnGraph  # mutual kNN graph on the kept points
    discarded_fraction: float


def largest_component(cloud: PointCloud, k: int) -> Prepared:
    graph = build_knn_graph(cloud, k, mutual=True)
    comps = connected_components(graph)
    kept = np.sort(comps[0])
    n = len(cloud)
    for comp in comps[1:]:
        if len(comp) >= MINOR_COMPONENT_FRACTION * n:
            log.warning("discarding secondary component of %d points (%.1f%%)", len(comp), 100.0 * len(comp) / n)
    frac = 1.0 - len(kept) / n
    if frac > 0:
        log.info("largest component keeps %d of %d points (discarded %.2f%%)", len(kept), n, 100 * frac)
    if len(kept) == n:
        return Prepared(kept, cloud, graph, 0.0)
    return Prepared(kept, cloud.subset(kept), graph.subgraph(kept), frac)


def segment(prep: Prepared, block_count: int) -> NDArray[np.int64]:
    n_blocks = min(block_count, len(prep.cloud))
    subsets = kd_partition(prep.cloud, n_blocks)
    return grow_blocks(prep.cloud, subsets, prep.graph, n_blocks).labels()


@dataclass
class BlockResult:
    block: int
    members: NDArray[np.int64]
    normals: NDArray[np.float64]
    iterations: int
    converged: bool
    mesh: TriangleMesh | None
    warnings: list[str] = field(default_factory=list)


def orient_blocks(
    prep: Prepared, labels: NDArray, cfg: PipelineConfig, workers: int = 1
) -> tuple[NDArray[np.float64], list[BlockResult]]:
    """Dipole initialisation followed by refinement, independently per block."""
    pts = prep.cloud.positions
    nbr, _ = exact_knn(pts, min(cfg.knn_k, len(pts) - 1))
    pca, degenerate = pca_normals(pts, cfg.knn_k, nbr)
    rcfg = cfg.refine_config()
    n_blocks = int(labels.max()) + 1

    def work(b: int) -> BlockResult:
        members = np.nonzero(labels == b)[0]
        try:
            sub = prep.graph.subgraph(members)
            init = orient_block_initial(pts[members], pca[members], sub, cfg.dipole_params(b), degenerate[members])
            res = refine_block(pts[members], init, rcfg)
        except Exception as exc:
            raise StageError("orient", f"block {b} ({len(members)} points): {exc}") from exc
        # keep the PCA direction, take the sign from the refined normal
        dots = np.einsum("ij,ij->i", init, res.normals)
        out = np.where((dots < 0)[:, None], -init, init)
        return BlockResult(b, members, out, res.iterations, res.converged, res.mesh, res.warnings)

    results = _map(work, list(range(n_blocks)), workers)
    normals = np.empty_like(pts)
    for r in results:
        normals[r.members] = r.normals
        for w in r.warnings:
            log.warning("block %d: %s", r.block, w)
    return normals, results


def score_pairs(
    prep: Prepared,
    labels: NDArray,
    normals: NDArray,
    cfg: PipelineConfig,
    meshes: dict[int, TriangleMesh] | None = None,
    workers: int = 1,
) -> BlockGraph:
    """Visibility consistency (alpha, alpha_bar) for every adjacent block pair."""
    pts = prep.cloud.positions
    spacing = local_spacing(pts)
    pairs = block_adjacency(labels, prep.graph)
    members = {b: np.nonzero(labels == b)[0] for b in range(int(labels.max()) + 1)}
    debug_root = Path(cfg.out_dir) / "views" if cfg.debug_views else None

    def work(pair: tuple[int, int]) -> tuple[int, int, float, float]:
        i, j = pair
        mi, mj = members[i], members[j]
        try:
            m1 = meshes.get(i) if meshes else None
            m2 = meshes.get(j) if meshes else None
            geo = geometry_for_pair(pts[mi], normals[mi], pts[mj], normals[mj], m1, m2, spacing[mi], spacing[mj])
            views = dodecahedron_views(pts[mi], pts[mj], cfg.resolution)
            dbg = debug_root / f"pair_{i}_{j}" if debug_root is not None else None
            sc = pair_consistency(geo, views, cfg.resolution, dbg)
        except Exception as exc:
            raise StageError("score", f"pair ({i}, {j}): {exc}") from exc
        return i, j, sc.alpha, sc.alpha_bar

    edges = _map(work, pairs, workers)
    return BlockGraph(int(labels.max()) + 1, edges, cfg.epsilon)


@dataclass
class PipelineResult:
    cloud: PointCloud  # kept points with final normals
    kept: NDArray[np.int64]
    labels: NDArray[np.int64]
    graph: BlockGraph
    assignment: FlipAssignment
    report: OrientationReport | None
    summary: dict
    timings: dict[str, float]
    out_dir: Path


def run_pipeline(cfg: PipelineConfig, cloud: PointCloud | None = None) -> PipelineResult:
    """Run every stage and write the artifacts to ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count()
    if cfg.reconstructor == "external":
        set_external_concurrency(workers)
    timings: dict[str, float] = {}

    def stage(name):
        class _T:
            def __enter__(self_):
                self_.t = time.perf_counter()

            def __exit__(self_, et, ev, tb):
                timings[name] = time.perf_counter() - self_.t
                log.info("stage %s: %.2fs", name, timings[name])
                return False

        return _T()

    with stage("read"):
        if cloud is None:
            if not cfg.input:
                raise ValueError("no input point file configured")
            cloud = plyio.read_points(cfg.input)
    gt_all = cloud.gt_normals if cloud.gt_normals is not None else cloud.normals

    with stage("graph"):
        try:
            prep = largest_component(PointCloud(cloud.positions), cfg.knn_k)
        except ValueError as exc:
            raise StageError("graph", str(exc)) from exc
        np.savetxt(out / "kept_indices.txt", prep.kept, fmt="%d")

    with stage("segment"):
        try:
            labels = segment(prep, cfg.block_count)
        except ValueError as exc:
            raise StageError("segment", str(exc)) from exc
        write_labels(out / "labels.txt", labels)

    with stage("orient"):
        normals, blocks = orient_blocks(prep, labels, cfg, workers)
        np.savetxt(out / "block_normals.txt", normals, fmt="%.17g")

    meshes = None
    if cfg.reconstructor != "smoothing":
        meshes = {r.block: r.mesh for r in blocks if r.mesh is not None and len(r.mesh)}
    with stage("score"):
        bgraph = score_pairs(prep, labels, normals, cfg, meshes, workers)
        write_graph(out / "graph.txt", bgraph)

    with stage("solve"):
        try:
            assignment = solve(bgraph, cfg.exact_limit, cfg.restarts, cfg.seed)
        except ValueError as exc:
            raise StageError("solve", str(exc)) from exc
        np.savetxt(out / "flips.txt", assignment.bits, fmt="%d")
        final = apply_flips(normals, labels, assignment.bits)

    result_cloud = PointCloud(prep.cloud.positions, final)
    report = None
    summary: dict = {
        "points": len(cloud),
        "kept_points": len(prep.kept),
        "discarded_fraction": prep.discarded_fraction,
        "blocks": int(labels.max()) + 1,
        "block_pairs": len(bgraph.edges),
        "flipped_blocks": int(np.sum(assignment.bits)),
        "solver_optimal": assignment.optimal,
        "objective": assignment.objective,
        "refine_converged_blocks": sum(r.converged for r in blocks),
    }
    with stage("evaluate"):
        if gt_all is not None:
            gt = gt_all[prep.kept]
            report = incorrect_ratio(final, gt, labels)
            result_cloud.gt_normals = gt
            summary["incorrect_ratio"] = report.incorrect_ratio
            summary["flipped_gt"] = report.flipped_gt
        else:
            log.info("input has no reference normals; skipping orientation metrics")
        if cfg.reference:
            ref = plyio.read_points(cfg.reference)
            summary["chamfer"] = chamfer(prep.cloud.positions, ref.positions)
            if report is not None:
                report.chamfer = summary["chamfer"]

    with stage("write"):
        try:
            plyio.write_oriented(
                out / "oriented.ply", result_cloud, None if report is None else report.correct, cfg.binary_output
            )
            write_report(out / "report.txt", summary)
            _write_block_csv(out / "per_block.csv", labels, blocks, report)
            if cfg.figures:
                from .plotting import render_run_figures

                render_run_figures(out, result_cloud, labels, bgraph, assignment, report)
        except OSError as exc:
            raise StageError("write", str(exc)) from exc

    with open(out / "timings.txt", "w") as fh:
        for k, v in timings.items():
            fh.write(f"{k}: {v:.3f}\n")
    return PipelineResult(result_cloud, prep.kept, labels, bgraph, assignment, report, summary, timings, out)


def _write_block_csv(path: Path, labels: NDArray, blocks: list[BlockResult], report: OrientationReport | None) -> None:
    counts = np.bincount(labels, minlength=len(blocks))
    with open(path, "w") as fh:
        fh.write("block,points,refine_iterations,refine_converged,incorrect_percent\n")
        for r in blocks:
            ratio = "" if report is None or not report.per_block else f"{report.per_block[r.block]:.4f}"
            fh.write(f"{r.block},{counts[r.block]},{r.iterations},{int(r.converged)},{ratio}\n")
