"""Tiny algebra for per-parameter-group gradient dictionaries.

A gradient is a dict mapping group name ("pf", "pb", "logZ", "flows") to a
flat float64 array matching that group's parameter vector. Helpers keep every
reduction in a fixed order so batch gradients are reproducible.
"""
from __future__ import annotations

import numpy as np

GradDict = dict[str, np.ndarray]


def zeros_for(sizes: dict[str, int]) -> GradDict:
    return {k: np.zeros(n) for k, n in sizes.items()}


def add_scaled(acc: GradDict, g: GradDict, scale: float = 1.0) -> GradDict:
    for k, v in g.items():
        acc[k] += scale * v
    return acc


def scaled(g: GradDict, scale: float) -> GradDict:
    return {k: scale * v for k, v in g.items()}


def combine(a: GradDict, b: GradDict) -> GradDict:
    return {k: a[k] + b[k] for k in a}


def max_abs(g: GradDict) -> float:
    return max((float(np.max(np.abs(v))) if v.size else 0.0) for v in g.values())


def max_abs_diff(a: GradDict, b: GradDict) -> float:
    return max(
        (float(np.max(np.abs(a[k] - b[k]))) if a[k].size else 0.0) for k in a
    )


def norm2(g: GradDict) -> float:
    return float(sum(np.dot(v, v) for v in g.values()))


def allfinite(g: GradDict) -> bool:
    return all(np.all(np.isfinite(v)) for v in g.values())
