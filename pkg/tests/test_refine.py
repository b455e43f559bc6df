import logging
import sys

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from blockorient.refine import (
    ReconstructionError,
    RefineConfig,
    TriangleMesh,
    crust_mesh,
    map_faces_to_points,
    mean_spacing,
    reconstruct,
    refine_block,
    trim_boundary_faces,
    update_normals,
)
from blockorient.synth import grid_mesh_faces

from conftest import jittered_plane


def grid_mesh(n, spacing=0.02, origin=(0.0, 0.0)):
    g = np.arange(n) * spacing
    x, y = np.meshgrid(g + origin[0], g + origin[1], indexing="ij")
    v = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], 1)
    return TriangleMesh(v, grid_mesh_faces(n, n))


def test_mesh_areas_and_normals():
    m = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 2, 0]], [[0, 1, 2]])
    assert m.areas[0] == pytest.approx(2.0)
    assert np.allclose(m.face_normals[0], [0, 0, 1])
    assert np.allclose(m.flipped().face_normals[0], [0, 0, -1])
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0]], [[0, 1, 2]])


def test_grid_faces_face_up():
    m = grid_mesh(5)
    assert np.allclose(m.face_normals, [0, 0, 1])


def test_smoothing_reconstruction_plane():
    pts = jittered_plane(30, seed=1)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    mesh = reconstruct(pts, nrm, RefineConfig())
    assert len(mesh) > len(pts)
    ok = mesh.areas > 0
    cos = np.abs(mesh.face_normals[ok, 2])
    assert np.all(cos >= np.cos(np.radians(5)))


def test_reconstruct_zero_points():
    with pytest.raises(ValueError):
        reconstruct(np.zeros((0, 3)), np.zeros((0, 3)))


def test_external_malformed_output(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys\nopen(sys.argv[2], 'w').write('not a ply')\n")
    cfg = RefineConfig(reconstructor="external", external_cmd=f"{sys.executable} {script} {{input}} {{output}}")
    pts = jittered_plane(5)
    with pytest.raises(ReconstructionError):
        reconstruct(pts, np.tile([0, 0, 1.0], (25, 1)), cfg)


def test_external_reconstructor_roundtrip(tmp_path):
    # writes a single triangle over the first three input points
    script = tmp_path / "tri.py"
    script.write_text(
        "import sys\n"
        "lines = open(sys.argv[1]).read().splitlines()\n"
        "start = lines.index('end_header') + 1\n"
        "v = [l.split()[:3] for l in lines[start:start + 3]]\n"
        "out = ['ply', 'format ascii 1.0', 'element vertex 3', 'property double x', 'property double y',\n"
        "       'property double z', 'element face 1', 'property list uchar int vertex_indices', 'end_header']\n"
        "out += [' '.join(x) for x in v] + ['3 0 1 2']\n"
        "open(sys.argv[2], 'w').write('\\n'.join(out) + '\\n')\n"
    )
    cfg = RefineConfig(reconstructor="external", external_cmd=f"{sys.executable} {script} {{input}} {{output}}")
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    mesh = reconstruct(pts, np.tile([0, 0, 1.0], (4, 1)), cfg)
    assert len(mesh) == 1


def test_failing_external_degrades(caplog):
    cfg = RefineConfig(reconstructor="external", external_cmd=f"{sys.executable} -c 'import sys; sys.exit(3)' {{input}} {{output}}")
    pts = jittered_plane(6)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    with caplog.at_level(logging.WARNING):
        res = refine_block(pts, nrm, cfg)
    assert np.array_equal(res.normals, nrm)
    assert res.warnings and "failed" in res.warnings[0]


def test_single_face_maps_to_k_points():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    pts = np.array([[0.3, 0.3, 0], [0.2, 0.3, 0], [0.3, 0.2, 0], [5, 5, 0], [6, 6, 0]], float)
    fm = map_faces_to_points(mesh, pts, 3)
    assert sorted(fm.point.tolist()) == [0, 1, 2]
    per = fm.per_point()
    assert [len(x) for x in per] == [1, 1, 1, 0, 0]


def test_roof_mapping_matches_brute_force():
    v = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 1], [1, 1, 1], [2, 0, 0], [2, 1, 0]], float)
    mesh = TriangleMesh(v, [[0, 2, 1], [1, 2, 3], [2, 4, 3], [3, 4, 5]])
    pts = np.random.default_rng(0).random((40, 3)) * [2, 1, 1]
    fm = map_faces_to_points(mesh, pts, 4)
    d = cdist(mesh.centroids, pts)
    for f in range(len(mesh)):
        assert set(fm.point[fm.face == f].tolist()) == set(np.argsort(d[f])[:4].tolist())


def test_update_single_and_cancel():
    old = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    mesh = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 1]], [[0, 1, 2], [0, 2, 1]])
    from blockorient.refine import FaceMap

    fm = FaceMap(3, np.array([0, 1, 1]), np.array([0, 0, 1]), np.array([2.0, 2.0, 2.0]),
                 np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, -1.0]]))
    new, change = update_normals(old, fm)
    assert np.allclose(new[0], [0, 0, 1])
    assert np.allclose(new[1], old[1])  # cancellation keeps the prior normal
    assert np.allclose(new[2], old[2])  # no contribution
    assert change == pytest.approx(90.0)
    assert np.allclose(np.linalg.norm(new, axis=1), 1.0, atol=1e-9)


def test_update_matches_weighted_sum(rng):
    from blockorient.refine import FaceMap

    n = 20
    old = rng.normal(size=(n, 3))
    old /= np.linalg.norm(old, axis=1, keepdims=True)
    rows = 100
    point = rng.integers(0, n, rows)
    area = rng.random(rows)
    nv = rng.normal(size=(rows, 3))
    nv /= np.linalg.norm(nv, axis=1, keepdims=True)
    new, _ = update_normals(old, FaceMap(n, point, np.arange(rows), area, nv))
    for i in range(n):
        m = point == i
        if m.any():
            s = (area[m, None] * nv[m]).sum(0)
            assert np.allclose(new[i], s / np.linalg.norm(s))


def test_trim_keeps_mesh_on_points():
    mesh = grid_mesh(10)
    out = trim_boundary_faces(mesh, mesh.vertices, 3.0)
    assert len(out) == len(mesh)


def test_trim_removes_apron():
    inner = grid_mesh(11, 0.02)
    pts = inner.vertices
    apron = grid_mesh(7, 0.2, origin=(-0.5, -0.5))
    verts = np.vstack([inner.vertices, apron.vertices])
    faces = np.vstack([inner.faces, apron.faces + len(inner.vertices)])
    mesh = TriangleMesh(verts, faces)
    out = trim_boundary_faces(mesh, pts, 3.0)
    kept = {tuple(f) for f in out.faces.tolist()}
    assert all(tuple(f) in kept for f in inner.faces.tolist())
    assert kept <= {tuple(f) for f in mesh.faces.tolist()}
    # the apron's outer ring is gone, and nothing close to the samples was removed
    outer = {tuple(f) for f in (apron.faces[apron.boundary_faces()] + len(inner.vertices)).tolist()}
    assert not (outer & kept)
    limit = 3.0 * mean_spacing(pts)
    removed = np.array([tuple(f) not in kept for f in mesh.faces.tolist()])
    d = cdist(mesh.centroids[removed], pts).min(axis=1)
    assert np.all(d > limit)


def test_trim_everything_far(caplog):
    mesh = grid_mesh(5)
    far_pts = np.array([[100.0, 100, 100], [101, 100, 100]])
    with caplog.at_level(logging.WARNING):
        out = trim_boundary_faces(mesh, far_pts, 3.0)
    assert len(out) == 0
    assert "removed every face" in caplog.text


def test_refine_fixes_flipped_plane_normals():
    pts = jittered_plane(40, seed=3)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    bad = np.random.default_rng(0).random(len(pts)) < 0.05
    nrm[bad] *= -1
    res = refine_block(pts, nrm, RefineConfig())
    assert np.mean(res.normals[:, 2] < 0) <= 0.005
    assert res.iterations <= 20


def test_refine_converged_exits_after_one():
    pts = jittered_plane(20, seed=4)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    res = refine_block(pts, nrm, RefineConfig())
    assert res.iterations == 1 and res.converged


def test_mock_reconstructor_is_one_update():
    pts = jittered_plane(15, seed=5)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    fixed = TriangleMesh(pts, [[0, 1, 15], [1, 16, 15]])

    cfg = RefineConfig(max_iters=1, reconstructor=lambda p, n: fixed)
    res = refine_block(pts, nrm, cfg)
    expect, _ = update_normals(nrm, map_faces_to_points(fixed, pts, cfg.k_map))
    assert np.allclose(res.normals, expect)


def test_config_defaults():
    cfg = RefineConfig()
    assert (cfg.max_iters, cfg.k_map, cfg.convergence_tol, cfg.distance_factor) == (20, 10, 0.5, 3.0)
    assert cfg.trim_start_iter == 17
    with pytest.raises(ValueError):
        RefineConfig(max_iters=0)


def test_crust_mesh_orientation_follows_normals():
    pts = jittered_plane(15, seed=6)
    up = crust_mesh(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
    down = crust_mesh(pts, np.tile([0, 0, -1.0], (len(pts), 1)))
    ok = up.areas > 0
    assert np.all(up.face_normals[ok, 2] > 0)
    assert np.all(down.face_normals[down.areas > 0, 2] < 0)


def test_mean_spacing_grid():
    assert mean_spacing(grid_mesh(5, 0.1).vertices) == pytest.approx(0.1)
