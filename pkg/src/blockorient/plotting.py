"""Static diagnostic figures written next to a run's text outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import PointCloud  # noqa: E402
from .graph_opt import BlockGraph, FlipAssignment  # noqa: E402
from .metrics import OrientationReport  # noqa: E402

MAX_SCATTER = 20_000
_META = {"Software": None}


def _subsample(n: int, limit: int = MAX_SCATTER) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.linspace(0, n - 1, limit).astype(np.int64)


def plot_orientation(path: Path, cloud: PointCloud, correct: np.ndarray | None) -> None:
    """Top-down scatter; blue = correct, red = incorrect (or blocks shaded when no reference)."""
    idx = _subsample(len(cloud))
    p = cloud.positions[idx]
    fig, ax = plt.subplots(figsize=(6, 5))
    if correct is not None:
        c = np.where(correct[idx][:, None], [[0, 0, 1.0]], [[1.0, 0, 0]])
        ax.scatter(p[:, 0], p[:, 1], c=c, s=1, linewidths=0)
        ax.set_title("orientation vs reference (blue correct, red wrong)")
    else:
        ax.scatter(p[:, 0], p[:, 1], c=cloud.normals[idx, 2], cmap="coolwarm", s=1, linewidths=0, vmin=-1, vmax=1)
        ax.set_title("final normals, z component")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_blocks(path: Path, cloud: PointCloud, labels: np.ndarray, flips: np.ndarray) -> None:
    idx = _subsample(len(cloud))
    p = cloud.positions[idx]
    lab = labels[idx]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    axes[0].scatter(p[:, 0], p[:, 1], c=lab % 20, cmap="tab20", s=1, linewidths=0)
    axes[0].set_title(f"{int(labels.max()) + 1} blocks")
    axes[1].scatter(p[:, 0], p[:, 1], c=flips[lab], cmap="coolwarm", s=1, linewidths=0, vmin=0, vmax=1)
    axes[1].set_title(f"flipped blocks: {int(flips.sum())}")
    for ax in axes:
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_edge_scores(path: Path, graph: BlockGraph, flips: np.ndarray) -> None:
    """Share of same-state weight per edge, split by whether the solver cut the edge."""
    if not graph.edges:
        return
    i, j, a, ab = graph.arrays()
    w = a / (a + ab + graph.epsilon)
    cut = flips[i] != flips[j]
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0, 1, 21)
    ax.hist([w[~cut], w[cut]], bins=bins, stacked=True, label=["kept", "cut"], color=["tab:blue", "tab:orange"])
    ax.set_xlabel("alpha / (alpha + alpha_bar)")
    ax.set_ylabel("block pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_block_errors(path: Path, per_block: list[float]) -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(np.arange(len(per_block)), per_block, color="tab:red")
    ax.set_xlabel("block")
    ax.set_ylabel("incorrect %")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def render_run_figures(
    out: Path,
    cloud: PointCloud,
    labels: np.ndarray,
    graph: BlockGraph,
    assignment: FlipAssignment,
    report: OrientationReport | None,
) -> list[Path]:
    fig_dir = Path(out) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    flips = np.asarray(assignment.bits, dtype=np.int64)
    written = [fig_dir / "orientation.png", fig_dir / "blocks.png"]
    plot_orientation(written[0], cloud, None if report is None else report.correct)
    plot_blocks(written[1], cloud, labels, flips)
    if graph.edges:
        written.append(fig_dir / "edge_scores.png")
        plot_edge_scores(written[-1], graph, flips)
    if report is not None and report.per_block:
        written.append(fig_dir / "block_errors.png")
        plot_block_errors(written[-1], report.per_block)
    return written
