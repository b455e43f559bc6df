import logging

import numpy as np
import pytest

from blockorient import cli, plyio, synth
from blockorient.geometry import PointCloud
from blockorient.metrics import read_report
from blockorient.pipeline import (
    WORKERS_ENV,
    PipelineConfig,
    StageError,
    block_seed,
    load_config,
    run_pipeline,
    worker_count,
)


def small_plane(n=1500, seed=0):
    return synth.build_scene(synth.plane_scene(n, 1.0, seed=seed))


def fast_cfg(tmp_path, **kw):
    base = dict(out_dir=str(tmp_path / "run"), block_count=4, resolution=96, figures=False)
    base.update(kw)
    return PipelineConfig(**base)


def test_default_parameters():
    cfg = PipelineConfig()
    assert (cfg.block_count, cfg.knn_k, cfg.passes, cfg.resolution) == (200, 10, 5, 400)
    assert (cfg.max_iters, cfg.c, cfg.exact_limit, cfg.epsilon) == (20, 4.0, 28, 1e-6)
    assert cfg.reconstructor == "smoothing"


@pytest.mark.parametrize("kw", [dict(block_count=0), dict(knn_k=2), dict(passes=0), dict(resolution=4)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PipelineConfig(**kw)


def test_refine_cmd_switches_reconstructor():
    assert PipelineConfig(refine_cmd="x {input} {output}").reconstructor == "external"


def test_load_config_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nblock-count = 12\nc = 2.5\nfigures = false\nrefine_cmd = none\n\nseed = 7  # trailing\n")
    cfg = load_config(p)
    assert (cfg.block_count, cfg.c, cfg.figures, cfg.refine_cmd, cfg.seed) == (12, 2.5, False, None, 7)
    assert load_config(p, seed=3, block_count=None).seed == 3
    p.write_text("bogus = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        load_config(p)
    p.write_text("seed 3\n")
    with pytest.raises(ValueError, match="key = value"):
        load_config(p)


def test_block_seed_independent_of_order():
    a = [block_seed(5, b) for b in range(10)]
    assert a == [block_seed(5, b) for b in reversed(range(10))][::-1]
    assert len(set(a)) == 10
    assert block_seed(5, 0) != block_seed(6, 0)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(WORKERS_ENV, "zero")
    assert worker_count() >= 1
    monkeypatch.delenv(WORKERS_ENV)
    assert 1 <= worker_count() <= 8


def test_stage_error_names_stage():
    e = StageError("score", "pair (1, 2): boom")
    assert e.stage == "score"
    assert str(e) == "[score] pair (1, 2): boom"


def test_small_plane_end_to_end(tmp_path):
    res = run_pipeline(fast_cfg(tmp_path), small_plane())
    out = res.out_dir
    assert res.report is not None and res.report.incorrect_ratio <= 1.0
    for name in ("kept_indices.txt", "labels.txt", "block_normals.txt", "graph.txt", "flips.txt",
                 "oriented.ply", "report.txt", "per_block.csv", "timings.txt"):
        assert (out / name).exists(), name
    rep = read_report(out / "report.txt")
    assert float(rep["incorrect_ratio"]) == pytest.approx(res.report.incorrect_ratio, rel=1e-5, abs=1e-9)
    assert int(rep["blocks"]) <= 4
    assert "read" not in rep  # timings stay out of the report
    back = plyio.read_points(out / "oriented.ply")
    assert np.allclose(np.linalg.norm(back.normals, axis=1), 1.0, atol=1e-6)
    assert len(back) == len(res.kept)


def test_plane_10k_eight_blocks(tmp_path):
    cloud = synth.build_scene(synth.plane_scene(10_000))
    res = run_pipeline(fast_cfg(tmp_path, block_count=8, resolution=200), cloud)
    assert res.report.incorrect_ratio <= 1.0


def test_no_reference_normals(tmp_path, caplog):
    cloud = PointCloud(small_plane().positions)
    with caplog.at_level(logging.INFO, logger="blockorient"):
        res = run_pipeline(fast_cfg(tmp_path), cloud)
    assert res.report is None
    assert "incorrect_ratio" not in read_report(res.out_dir / "report.txt")
    back = plyio.read_points(res.out_dir / "oriented.ply")
    assert back.normals is not None
    assert any("no reference normals" in r.message for r in caplog.records)


def test_disconnected_input_reports_discard(tmp_path, caplog):
    main = small_plane(1500)
    stray = small_plane(100, seed=1).positions * 0.2 + [5.0, 5.0, 0.0]
    cloud = PointCloud(np.concatenate([main.positions, stray]),
                       gt_normals=np.concatenate([main.gt_normals, np.tile([0, 0, 1.0], (100, 1))]))
    with caplog.at_level(logging.INFO, logger="blockorient"):
        res = run_pipeline(fast_cfg(tmp_path), cloud)
    assert res.summary["discarded_fraction"] == pytest.approx(100 / 1600)
    assert len(res.kept) == 1500
    assert any("discard" in r.message for r in caplog.records)


def test_figures_written(tmp_path):
    res = run_pipeline(fast_cfg(tmp_path, figures=True), small_plane())
    figs = sorted(p.name for p in (res.out_dir / "figures").iterdir())
    assert {"orientation.png", "blocks.png"} <= set(figs)


def test_chamfer_against_reference(tmp_path):
    cloud = small_plane()
    ref = tmp_path / "ref.ply"
    plyio.write_points_ply(ref, cloud.positions)
    res = run_pipeline(fast_cfg(tmp_path, reference=str(ref)), cloud)
    assert res.summary["chamfer"] == pytest.approx(0.0, abs=1e-12)


def test_cli_subcommands(tmp_path):
    pts = tmp_path / "plane.ply"
    out = tmp_path / "steps"
    assert cli.main(["gen", "plane", str(pts), "--points", "1500"]) == 0
    flags = ["--out-dir", str(out), "--blocks", "4", "--resolution", "96"]
    assert cli.main(["segment", str(pts), *flags]) == 0
    assert cli.main(["orient-blocks", str(pts), *flags]) == 0
    assert cli.main(["score", str(pts), *flags]) == 0
    assert cli.main(["solve", "--input", str(pts), *flags]) == 0
    assert (out / "oriented.ply").exists()
    report = tmp_path / "eval.txt"
    kept = np.loadtxt(out / "kept_indices.txt", dtype=int)
    ref = plyio.read_points(pts)
    sub = tmp_path / "ref_kept.ply"
    plyio.write_points_ply(sub, ref.positions[kept], ref.normals[kept])
    assert cli.main(["eval", str(out / "oriented.ply"), str(sub), "--report", str(report),
                     "--labels", str(out / "labels.txt")]) == 0
    assert float(read_report(report)["incorrect_ratio"]) <= 1.0
    csv = tmp_path / "g.csv"
    assert cli.main(["dump-graph", str(out / "graph.txt"), "--csv", str(csv)]) == 0
    assert csv.read_text().startswith("i,j,alpha,alpha_bar,w_same,w_diff\n")


def test_cli_pipeline_and_exit_codes(tmp_path, capsys):
    pts = tmp_path / "plane.ply"
    cli.main(["gen", "plane", str(pts), "--points", "1500"])
    cfg = tmp_path / "c.cfg"
    cfg.write_text("block_count = 4\nresolution = 96\n")
    rc = cli.main(["pipeline", str(pts), "--config", str(cfg), "--out-dir", str(tmp_path / "r"), "--no-figures"])
    assert rc == 0
    assert "incorrect_ratio" in capsys.readouterr().out
    assert cli.main(["pipeline", str(tmp_path / "missing.ply"), "--out-dir", str(tmp_path / "m")]) == 1
    tiny = tmp_path / "tiny.xyz"
    tiny.write_text("0 0 0\n1 0 0\n0 1 0\n1 1 0\n")
    assert cli.main(["pipeline", str(tiny), "--out-dir", str(tmp_path / "t"), "--no-figures"]) == 2


def test_failing_reconstructor_keeps_initial_normals(tmp_path, caplog):
    cfg = fast_cfg(tmp_path, refine_cmd="false {input} {output}")
    with caplog.at_level(logging.WARNING):
        res = run_pipeline(cfg, small_plane())
    assert res.summary["refine_converged_blocks"] == 0
    assert res.report.incorrect_ratio <= 1.0
    assert any("reconstruct" in r.message for r in caplog.records)
