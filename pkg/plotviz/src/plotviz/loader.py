"""Readers for the training CLI's metrics CSV and distribution JSON files.

This package consumes files only; it has no dependency on the training
library. The expected CSV header is pinned here and any mismatch is an error
(silently misaligned columns would make the figures lie).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

METRICS_HEADER = ["trajectories_seen", "jsd", "log_Z_estimate", "mean_loss",
                  "mean_reward", "max_importance_weight", "eps_current", "wall_ms"]


@dataclass
class RunCurve:
    path: str
    label: str
    trajectories: np.ndarray
    jsd: np.ndarray


@dataclass
class GridDistribution:
    name: str
    H: int
    D: int
    probs: np.ndarray  # row-major over grid cells


def load_metrics_csv(path: str, label: str) -> RunCurve:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty CSV")
    if lines[0].split(",") != METRICS_HEADER:
        raise ValueError(f"{path}: metrics CSV header mismatch")
    if len(lines) == 1:
        raise ValueError(f"{path}: CSV has no data rows")
    traj, jsd = [], []
    for ln in lines[1:]:
        vals = ln.split(",")
        traj.append(int(vals[0]))
        jsd.append(float(vals[1]))
    return RunCurve(path, label, np.asarray(traj), np.asarray(jsd))


def parse_dist_spec(spec: str) -> tuple[str, str | None]:
    """Split "file.json:key" into (path, key); the key picks one entry of a
    multi-distribution file."""
    if ":" in spec:
        path, key = spec.rsplit(":", 1)
        return path, key
    return spec, None


def load_grid_distributions(spec: str, H: int) -> list[GridDistribution]:
    """Distributions from one file spec, validated against the grid size."""
    path, key = parse_dist_spec(spec)
    with open(path) as f:
        doc = json.load(f)
    entries = doc.get("entries", {"dist": doc})
    if key is not None:
        if key not in entries:
            raise ValueError(f"{path}: no entry named {key!r}")
        entries = {key: entries[key]}
    if "D" in doc and doc["D"] != 2:
        raise ValueError(f"{path}: heatmaps need D=2 grids, got D={doc['D']}")
    if "H" in doc and doc["H"] != H:
        raise ValueError(f"{path}: file H={doc['H']} does not match --H {H}")
    out = []
    for name, entry in entries.items():
        probs = np.asarray(entry["probs"], dtype=float)
        if probs.size != H * H:
            raise ValueError(f"{path}:{name}: expected {H * H} entries, "
                             f"got {probs.size}")
        out.append(GridDistribution(name, H, 2, probs))
    return out


def group_by_label(curves: list[RunCurve]) -> dict[str, list[RunCurve]]:
    grouped: dict[str, list[RunCurve]] = {}
    for c in curves:
        grouped.setdefault(c.label, []).append(c)
    return grouped


def mean_and_stderr(runs: list[RunCurve]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-evaluation-point mean and standard error across a label's runs.

    Runs are aligned on their trajectories_seen values (early-stopped runs
    simply contribute to fewer points); points present in a single run get a
    zero-width band.
    """
    xs = sorted({int(t) for r in runs for t in r.trajectories})
    mean, err = [], []
    for x in xs:
        vals = [float(r.jsd[list(r.trajectories).index(x)])
                for r in runs if x in r.trajectories]
        vals = [v for v in vals if math.isfinite(v)]
        if not vals:
            mean.append(math.nan)
            err.append(0.0)
            continue
        m = sum(vals) / len(vals)
        mean.append(m)
        if len(vals) > 1:
            var = sum((v - m) ** 2 for v in vals) / (len(vals) - 1)
            err.append(math.sqrt(var / len(vals)))
        else:
            err.append(0.0)
    return np.asarray(xs), np.asarray(mean), np.asarray(err)
