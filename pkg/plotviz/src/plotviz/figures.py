"""Figure rendering. Pure functions of the input files: fixed style, no
timestamps, so identical inputs produce byte-identical images."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .loader import GridDistribution, RunCurve, group_by_label, mean_and_stderr

_CURVE_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def render_jsd_curves(curves: list[RunCurve], out_path: str,
                      title: str = "JSD between learned and target marginals") -> None:
    """One curve per label: mean JSD across that label's runs against
    trajectories sampled, with a standard-error band; log-scaled y axis."""
    if not curves:
        raise ValueError("no runs given")
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=120)
    for i, (label, runs) in enumerate(sorted(group_by_label(curves).items())):
        x, mean, err = mean_and_stderr(runs)
        color = _CURVE_COLORS[i % len(_CURVE_COLORS)]
        ax.plot(x, mean, label=f"{label} ({len(runs)} run{'s' * (len(runs) > 1)})",
                color=color)
        ax.fill_between(x, mean - err, mean + err, color=color, alpha=0.25,
                        linewidth=0)
    ax.set_yscale("log")
    ax.set_xlabel("trajectories sampled")
    ax.set_ylabel("JSD (nats)")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, which="both", alpha=0.2)
    fig.tight_layout()
    fig.savefig(out_path, format=_format_of(out_path))
    plt.close(fig)


def heatmap_grids(dists: list[GridDistribution], H: int) -> list[np.ndarray]:
    """The H x H panel arrays: cell (i, j) is the probability of the grid cell
    with row-major rank i*H+j, matching the environment's state numbering."""
    return [d.probs.reshape(H, H) for d in dists]


def render_grid_heatmap(dists: list[GridDistribution], H: int, out_path: str) -> None:
    """Side-by-side H x H heatmaps, one panel per distribution.

    Intensity is probability itself (shared color scale across panels).
    """
    if not dists:
        raise ValueError("no distributions given")
    n = len(dists)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.6), dpi=120, squeeze=False)
    vmax = max(float(d.probs.max()) for d in dists)
    for ax, dist, grid in zip(axes[0], dists, heatmap_grids(dists, H)):
        im = ax.imshow(grid, origin="lower", cmap="viridis", vmin=0.0, vmax=vmax,
                       interpolation="nearest")
        ax.set_title(dist.name)
        ax.set_xticks([0, H - 1])
        ax.set_yticks([0, H - 1])
    fig.colorbar(im, ax=[a for a in axes[0]], shrink=0.85, label="probability")
    fig.savefig(out_path, format=_format_of(out_path))
    plt.close(fig)


def _format_of(path: str) -> str:
    ext = path.rsplit(".", 1)[-1].lower() if "." in path else "png"
    if ext not in ("png", "svg", "pdf"):
        raise ValueError(f"unsupported image format {ext!r}")
    return ext
