import numpy as np
import pytest

from blockorient.geometry import build_knn_graph, connected_components
from blockorient.synth import (
    NOISE1_SIGMA,
    Patch,
    QuadricSpec,
    SceneSpec,
    build_scene,
    open_room,
    plane_scene,
    quadric_height,
    quadric_normal,
    s_curve,
    sample_quadric,
    sample_s_cylinder,
)


def test_quadric_examples():
    flat = sample_quadric(QuadricSpec(0, 0, 1.0, 0.1))
    assert np.allclose(flat.gt_normals, [0, 0, 1])
    assert np.allclose(flat.positions[:, 2], 0)
    assert np.allclose(quadric_normal(QuadricSpec(1, -1), 0.0, 0.0), [0, 0, 1])
    assert np.allclose(quadric_normal(QuadricSpec(1, 2), 1.0, 0.0), np.array([-1, 0, 1]) / np.sqrt(2))


def test_quadric_kinds():
    assert QuadricSpec(1, 1).kind == "elliptic paraboloid"
    assert QuadricSpec(1, 0).kind == "parabolic cylinder"
    assert QuadricSpec(1, -1).kind == "hyperbolic paraboloid"
    with pytest.raises(ValueError):
        QuadricSpec(1, 1, spacing=0)


@pytest.mark.parametrize("k1,k2", [(1, 1), (1, 0), (1, -1), (0.3, 2.5)])
def test_normals_match_central_differences(k1, k2):
    spec = QuadricSpec(k1, k2, 1.0, 0.05)
    c = sample_quadric(spec)
    h = 1e-6
    x, y = c.positions[:, 0], c.positions[:, 1]
    zx = (quadric_height(spec, x + h, y) - quadric_height(spec, x - h, y)) / (2 * h)
    zy = (quadric_height(spec, x, y + h) - quadric_height(spec, x, y - h)) / (2 * h)
    g = np.stack([-zx, -zy, np.ones_like(zx)], 1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    assert np.allclose(c.gt_normals, g, atol=1e-6)
    assert np.allclose(np.linalg.norm(c.gt_normals, axis=1), 1, atol=1e-12)


def test_s_cylinder_straight_is_plane():
    c = sample_s_cylinder(0.0, 1.0, 1.0, 0.1)
    assert np.allclose(c.gt_normals, [0, 0, 1])


def test_s_cylinder_zero_sweep_is_strip():
    c = sample_s_cylinder(1.0, 1.0, 0.0, 0.05)
    assert np.all(c.positions[:, 1] == 0)


def test_s_curve_normal_flips_side_across_inflection():
    pts, nrm, kappa = s_curve(1.0, 1.0, 0.01)
    # analytic tangent of z = x^3 and its normal
    x = pts[:, 0]
    t = np.stack([np.ones_like(x), 3 * x**2], 1)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    assert np.allclose(np.einsum("ij,ij->i", t, nrm), 0, atol=1e-12)
    # the normal lies on the concave side on one half and the convex side on the other
    left, right = x < -0.05, x > 0.05
    assert np.all(kappa[left] < 0) and np.all(kappa[right] > 0)
    side = np.sign(kappa)
    assert set(side[left]) == {-1.0} and set(side[right]) == {1.0}
    # arc-length spacing is uniform
    step = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert step.max() - step.min() < 1e-3


def test_single_plane_scene_exact():
    c = build_scene(plane_scene(500, 1.0))
    assert len(c) == 500
    assert np.all(c.positions[:, 2] == 0)
    assert np.all((c.positions[:, :2] >= 0) & (c.positions[:, :2] <= 1))


def test_scene_determinism_and_validation():
    a = build_scene(open_room(5000, 0.004, seed=3))
    b = build_scene(open_room(5000, 0.004, seed=3))
    assert np.array_equal(a.positions, b.positions)
    with pytest.raises(ValueError):
        SceneSpec("x", (Patch((0, 0, 0), (1, 0, 0), (0, 1, 0)),), 0)
    with pytest.raises(ValueError):
        SceneSpec("x", (Patch((0, 0, 0), (1, 0, 0), (0, 1, 0)),), 10, -1.0)


def test_open_room_connected():
    c = build_scene(open_room(50_000))
    assert len(c) == 50_000
    assert len(connected_components(build_knn_graph(c, 10))) == 1
    assert np.allclose(np.linalg.norm(c.gt_normals, axis=1), 1)


def test_open_room_normals_face_inside():
    c = build_scene(open_room(20_000))
    center = np.array([2.0, 1.5, 1.25])
    walls = np.abs(c.gt_normals[:, 2]) < 0.5
    table = (
        (c.positions[:, 0] > 1.39) & (c.positions[:, 0] < 2.61)
        & (c.positions[:, 1] > 1.09) & (c.positions[:, 1] < 1.91)
    )
    room_walls = walls & ~table
    d = np.einsum("ij,ij->i", center - c.positions[room_walls], c.gt_normals[room_walls])
    assert np.all(d > 0)
    # table skirts face away from the table centre
    tc = np.array([2.0, 1.5, 0.375])
    skirts = walls & table
    d = np.einsum("ij,ij->i", c.positions[skirts] - tc, c.gt_normals[skirts])
    assert skirts.any() and np.all(d > 0)


def test_noise_mean_displacement():
    c0 = build_scene(plane_scene(100_000, 5.0, 0.0, seed=1))
    c1 = build_scene(plane_scene(100_000, 5.0, NOISE1_SIGMA, seed=1))
    mean = np.abs(c1.positions - c0.positions).sum(axis=1).mean()
    assert mean == pytest.approx(0.0032, rel=0.05)
    assert np.array_equal(c0.gt_normals, c1.gt_normals)
