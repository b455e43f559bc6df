"""Command-line entry point. Exit codes: 0 success, 1 input error, 2 stage failure."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import plyio, synth
from .geometry import PointCloud
from .graph_opt import GraphError, apply_flips, read_graph, solve, write_graph
from .metrics import incorrect_ratio, write_report
from .pipeline import (
    PipelineConfig,
    Prepared,
    StageError,
    largest_component,
    load_config,
    orient_blocks,
    run_pipeline,
    score_pairs,
    segment,
    worker_count,
)
from .segmentation import read_labels, write_labels

log = logging.getLogger("blockorient")

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 1, 2

# argparse dest -> PipelineConfig field
_FLAG_FIELDS = {
    "blocks": "block_count",
    "knn": "knn_k",
    "c": "c",
    "passes": "passes",
    "resolution": "resolution",
    "seed": "seed",
    "refine_cmd": "refine_cmd",
    "exact_limit": "exact_limit",
    "out_dir": "out_dir",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file; flags override it")
    p.add_argument("--blocks", type=int, help="target block count (default 200)")
    p.add_argument("--knn", type=int, help="neighbours for the kNN graph and PCA (default 10)")
    p.add_argument("--c", type=float, help="dipole field exponent parameter (default 4)")
    p.add_argument("--passes", type=int, help="greedy passes per block (default 5)")
    p.add_argument("--resolution", type=int, help="raster resolution per view (default 400)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--refine-cmd", help="external reconstructor command with {input} and {output} placeholders")
    p.add_argument("--exact-limit", type=int, help="largest block graph solved exactly (default 28)")
    p.add_argument("--out-dir", help="run directory (default ./run)")


def _config(args: argparse.Namespace, input_path: str | None = None) -> PipelineConfig:
    overrides = {f: getattr(args, a) for a, f in _FLAG_FIELDS.items() if getattr(args, a, None) is not None}
    if input_path is not None:
        overrides["input"] = input_path
    if getattr(args, "no_figures", False):
        overrides["figures"] = False
    if getattr(args, "reference", None):
        overrides["reference"] = args.reference
    if getattr(args, "debug_views", False):
        overrides["debug_views"] = True
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    return PipelineConfig(**overrides)


def _prepared(cfg: PipelineConfig, out: Path) -> Prepared:
    cloud = plyio.read_points(cfg.input)
    kept_path = out / "kept_indices.txt"
    if kept_path.exists():
        kept = np.atleast_1d(np.loadtxt(kept_path, dtype=np.int64))
        sub = cloud.subset(kept) if len(kept) != len(cloud) else cloud
        prep = largest_component(PointCloud(sub.positions), cfg.knn_k)
        return Prepared(kept[prep.kept], prep.cloud, prep.graph, 1.0 - len(prep.kept) / len(cloud))
    return largest_component(PointCloud(cloud.positions), cfg.knn_k)


def cmd_pipeline(args) -> int:
    cfg = _config(args, args.input)
    res = run_pipeline(cfg)
    for k, v in res.summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args, args.input)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = largest_component(PointCloud(plyio.read_points(cfg.input).positions), cfg.knn_k)
    np.savetxt(out / "kept_indices.txt", prep.kept, fmt="%d")
    try:
        labels = segment(prep, cfg.block_count)
    except ValueError as exc:
        raise StageError("segment", str(exc)) from exc
    write_labels(out / "labels.txt", labels)
    print(f"blocks: {int(labels.max()) + 1}")
    return EXIT_OK


def cmd_orient_blocks(args) -> int:
    cfg = _config(args, args.input)
    out = Path(cfg.out_dir)
    prep = _prepared(cfg, out)
    labels = read_labels(out / "labels.txt")
    normals, blocks = orient_blocks(prep, labels, cfg, worker_count())
    np.savetxt(out / "block_normals.txt", normals, fmt="%.17g")
    print(f"blocks oriented: {len(blocks)}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args, args.input)
    out = Path(cfg.out_dir)
    prep = _prepared(cfg, out)
    labels = read_labels(out / "labels.txt")
    normals = np.loadtxt(out / "block_normals.txt").reshape(-1, 3)
    graph = score_pairs(prep, labels, normals, cfg, None, worker_count())
    write_graph(out / "graph.txt", graph)
    print(f"pairs scored: {len(graph.edges)}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    graph = read_graph(args.graph or out / "graph.txt")
    res = solve(graph, cfg.exact_limit, cfg.restarts, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "flips.txt", res.bits, fmt="%d")
    if args.input and (out / "block_normals.txt").exists():
        cloud = plyio.read_points(args.input)
        kept = np.atleast_1d(np.loadtxt(out / "kept_indices.txt", dtype=np.int64))
        labels = read_labels(out / "labels.txt")
        normals = np.loadtxt(out / "block_normals.txt").reshape(-1, 3)
        final = apply_flips(normals, labels, res.bits)
        plyio.write_oriented(out / "oriented.ply", PointCloud(cloud.positions[kept], final))
    print(f"objective: {res.objective!r}")
    print(f"optimal: {res.optimal}")
    print(f"flipped blocks: {int(res.bits.sum())}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = plyio.read_points(args.pred)
    ref = plyio.read_points(args.gt)
    if pred.normals is None or ref.normals is None:
        raise ValueError("both files need normals")
    if len(pred) != len(ref):
        raise ValueError(f"point counts differ: {len(pred)} vs {len(ref)}")
    labels = read_labels(args.labels) if args.labels else None
    rep = incorrect_ratio(pred.normals, ref.normals, labels)
    values = {"incorrect_ratio": rep.incorrect_ratio, "flipped_gt": rep.flipped_gt}
    if labels is not None:
        values["per_block"] = rep.per_block
    if args.report:
        write_report(args.report, values)
    if args.colored:
        plyio.write_oriented(args.colored, pred, rep.correct)
    for k, v in values.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.preset == "quadric":
        cloud = synth.sample_quadric(synth.QuadricSpec(args.k1, args.k2, args.extent, args.spacing))
    elif args.preset == "s_cylinder":
        cloud = synth.sample_s_cylinder(args.amplitude, args.extent, args.sweep, args.spacing)
    else:
        maker = synth.PRESETS[args.preset]
        kw = {"noise_sigma": args.noise, "seed": args.seed}
        if args.points is not None:
            kw["n_points"] = args.points
        cloud = synth.build_scene(maker(**kw))
    out = Path(args.out)
    if out.suffix.lower() == ".ply":
        plyio.write_points_ply(out, cloud.positions, cloud.gt_normals, binary=args.binary)
    else:
        plyio.write_xyz(out, cloud, use_gt=True)
    print(f"wrote {len(cloud)} points to {out}")
    return EXIT_OK


def cmd_dump_graph(args) -> int:
    graph = read_graph(args.graph)
    ws, wd = graph.weights()
    lines = ["i,j,alpha,alpha_bar,w_same,w_diff"]
    for (i, j, a, ab), s, d in zip(graph.edges, ws, wd):
        lines.append(f"{i},{j},{a!r},{ab!r},{float(s)!r},{float(d)!r}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockorient", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run every stage on a point file")
    p.add_argument("input")
    _add_config_flags(p)
    p.add_argument("--reference", help="point file for the Chamfer distance")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--debug-views", action="store_true", help="dump per-view rasters for every pair")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("segment", help="largest component and block labels")
    p.add_argument("input")
    _add_config_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("orient-blocks", help="per-block initial orientation and refinement")
    p.add_argument("input")
    _add_config_flags(p)
    p.set_defaults(func=cmd_orient_blocks)

    p = sub.add_parser("score", help="visibility scores for adjacent block pairs")
    p.add_argument("input")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("solve", help="global block flips from a graph file")
    p.add_argument("graph", nargs="?", help="graph file (default <out-dir>/graph.txt)")
    p.add_argument("--input", help="point file; with a run directory also writes oriented.ply")
    _add_config_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="compare predicted normals against reference normals")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--labels", help="per-point block labels for per-block ratios")
    p.add_argument("--report", help="write key: value report here")
    p.add_argument("--colored", help="write a blue/red PLY of correct/incorrect points")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write a synthetic point cloud with reference normals")
    p.add_argument("preset", choices=sorted([*synth.PRESETS, "quadric", "s_cylinder"]))
    p.add_argument("out")
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k1", type=float, default=1.0)
    p.add_argument("--k2", type=float, default=1.0)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--sweep", type=float, default=2.0)
    p.add_argument("--spacing", type=float, default=0.02)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dump-graph", help="print a graph file as CSV with edge weights")
    p.add_argument("graph")
    p.add_argument("--csv", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_dump_graph)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except (OSError, ValueError, GraphError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
