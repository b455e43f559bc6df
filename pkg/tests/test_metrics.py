import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from blockorient.metrics import chamfer, incorrect_ratio, read_report, write_report


def random_normals(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_identical_normals(rng):
    n = random_normals(rng, 100)
    rep = incorrect_ratio(n, n)
    assert rep.incorrect_ratio == 0 and not rep.flipped_gt


def test_fully_negated(rng):
    n = random_normals(rng, 100)
    rep = incorrect_ratio(-n, n)
    assert rep.incorrect_ratio == 0 and rep.flipped_gt


def test_half_disagreeing_is_fifty(rng):
    n = random_normals(rng, 100)
    pred = n.copy()
    pred[:50] *= -1
    rep = incorrect_ratio(pred, n)
    assert rep.incorrect_ratio == 50.0 and not rep.flipped_gt


def test_orthogonal_counts_incorrect():
    rep = incorrect_ratio(np.array([[1.0, 0, 0], [0, 0, 1.0]]), np.array([[0, 1.0, 0], [0, 0, 1.0]]))
    assert rep.incorrect_ratio == 50.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        incorrect_ratio(np.zeros((2, 3)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_ratio_capped_and_negation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    gt = random_normals(rng, n)
    pred = random_normals(rng, n)
    labels = rng.integers(0, 4, n)
    a = incorrect_ratio(pred, gt, labels)
    b = incorrect_ratio(-pred, gt)
    assert 0 <= a.incorrect_ratio <= 50
    assert a.incorrect_ratio == pytest.approx(b.incorrect_ratio)
    assert all(0 <= r <= 100 for r in a.per_block)


def test_chamfer_examples():
    a = np.random.default_rng(0).random((20, 3))
    assert chamfer(a, a) == 0
    assert chamfer([[0, 0, 0]], [[0, 3, 4]]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), a)


def test_chamfer_brute_force(rng):
    for _ in range(5):
        a = rng.random((int(rng.integers(1, 500)), 3))
        b = rng.random((int(rng.integers(1, 500)), 3))
        d = cdist(a, b)
        expect = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
        assert chamfer(a, b) == pytest.approx(expect, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_and_translation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((30, 3)), rng.random((40, 3))
    t = rng.normal(size=3) * 10
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)
    assert chamfer(a + t, b + t) == pytest.approx(chamfer(a, b), rel=1e-9)


def test_report_roundtrip(tmp_path):
    write_report(tmp_path / "r.txt", {"incorrect_ratio": 1.25, "flipped_gt": True, "per_block": [0.0, 2.5], "skip": None})
    r = read_report(tmp_path / "r.txt")
    assert r == {"incorrect_ratio": "1.25", "flipped_gt": "true", "per_block": "0 2.5"}
