"""Class-wise IoU overlap graphs, connected components, and entropy weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, iou_matrix

__all__ = [
    "DegenerateWeights",
    "ClusterAssignment",
    "predicted_classes",
    "build_class_graphs",
    "cluster_weights",
    "iwe_loss",
]


class DegenerateWeights(ValueError):
    """Entropy weights sum to zero; the weighted mean is undefined."""


@dataclass(frozen=True)
class ClusterAssignment:
    """Connected-component labels for one image's proposals."""

    classes: np.ndarray         # (N,) predicted class per proposal
    component_id: np.ndarray    # (N,) smallest member index of the component
    component_size: np.ndarray  # (N,) member count of the component


def predicted_classes(scores: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lower class index."""
    return np.argmax(np.asarray(scores, dtype=float), axis=-1)


class _UnionFind:
    """Disjoint sets over 0..n-1; roots stay at the smallest member index."""

    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _as_box_array(boxes: Sequence[Box] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=float).reshape(-1, 4)
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=float).reshape(-1, 4)


def build_class_graphs(
    boxes: Sequence[Box] | np.ndarray, classes: np.ndarray, theta: float
) -> ClusterAssignment:
    """Connected components of the per-class graphs with edges where IoU >= theta.

    Proposals of different predicted classes are never connected. Component
    ids equal the smallest member index, so labels do not depend on how the
    scan visits pairs.
    """
    if not (0.0 <= theta <= 1.0):
        raise ValueError(f"theta must be in [0, 1]: {theta}")
    arr = _as_box_array(boxes)
    classes = np.asarray(classes, dtype=int)
    if arr.shape[0] != classes.shape[0]:
        raise ValueError(f"{arr.shape[0]} boxes vs {classes.shape[0]} classes")
    n = arr.shape[0]
    uf = _UnionFind(n)
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        if idx.size < 2:
            continue
        overlap = iou_matrix(arr[idx])
        ii, jj = np.nonzero(np.triu(overlap >= theta, k=1))
        for a, b in zip(idx[ii], idx[jj]):
            uf.union(int(a), int(b))
    component_id = np.array([uf.find(i) for i in range(n)], dtype=int)
    sizes = np.bincount(component_id, minlength=max(n, 1))[component_id] if n else np.zeros(0, int)
    return ClusterAssignment(classes=classes, component_id=component_id, component_size=sizes)


def cluster_weights(assignment: ClusterAssignment, gamma: float) -> np.ndarray:
    """Per-proposal weight: its component size raised to gamma."""
    if not math.isfinite(gamma):
        raise ValueError(f"gamma must be finite: {gamma}")
    return assignment.component_size.astype(float) ** float(gamma)


def iwe_loss(entropies: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean entropy; the weights act as constants, never differentiated."""
    h = np.asarray(entropies, dtype=float)
    w = np.asarray(weights, dtype=float)
    if h.shape != w.shape or h.ndim != 1:
        raise ValueError(f"shape mismatch {h.shape} vs {w.shape}")
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeights(f"weights sum to {total}; need a positive total")
    return float(np.dot(w, h) / total)
