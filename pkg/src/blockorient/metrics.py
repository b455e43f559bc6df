"""Orientation and geometry metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree


@dataclass
class OrientationReport:
    incorrect_ratio: float | None  # percent, at most 50
    flipped_gt: bool = False
    per_block: list[float] = field(default_factory=list)
    chamfer: float | None = None
    correct: NDArray[np.bool_] | None = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "incorrect_ratio": self.incorrect_ratio,
            "flipped_gt": self.flipped_gt,
            "chamfer": self.chamfer,
        }
        d.update(self.extra)
        return d


def incorrect_ratio(pred: NDArray, gt: NDArray, labels: NDArray | None = None) -> OrientationReport:
    """Percentage of points whose normal is not within 90 degrees of ground truth.

    Ground truth of an open surface is only defined up to a global sign: when
    more than half the points disagree, the ground truth is negated. A dot
    product of exactly zero counts as wrong under either sign, so the negation
    is only taken when it lowers the count; the result stays at or below 50%
    unless such zeros are present.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has shape {pred.shape}, ground truth {gt.shape}")
    n = len(pred)
    if n == 0:
        raise ValueError("no normals to compare")
    dots = np.einsum("nd,nd->n", pred, gt)
    correct = dots > 0
    wrong = n - int(correct.sum())
    flipped = False
    if 2 * wrong > n:
        alt = dots < 0
        if n - int(alt.sum()) < wrong:
            correct, wrong, flipped = alt, n - int(alt.sum()), True
    per_block = []
    if labels is not None:
        labels = np.asarray(labels)
        for b in np.unique(labels[labels >= 0]):
            m = labels == b
            per_block.append(100.0 * float(np.mean(~correct[m])))
    return OrientationReport(100.0 * wrong / n, bool(flipped), per_block, None, correct)


def chamfer(points_a: NDArray, points_b: NDArray) -> float:
    """Symmetric mean nearest-neighbour distance, averaged over both directions."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def write_report(path: str | Path, values: dict) -> None:
    """``key: value`` lines; lists become space-separated values."""
    with open(path, "w") as fh:
        for k, v in values.items():
            if v is None:
                continue
            if isinstance(v, (list, tuple, np.ndarray)):
                v = " ".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            fh.write(f"{k}: {v}\n")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if ":" in line:
                k, v = line.split(":", 1)
                out[k.strip()] = v.strip()
    return out
