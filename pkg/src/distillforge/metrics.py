"""Geometry/appearance metrics used by the closed-loop experiments."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric Chamfer: mean nearest-neighbor distance, averaged both ways."""
    ta = cKDTree(points_a)
    tb = cKDTree(points_b)
    d_ab = tb.query(points_a)[0].mean()
    d_ba = ta.query(points_b)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def reference_color(points: np.ndarray) -> np.ndarray:
    """The procedural vertex-color target used by recovery experiments."""
    return np.clip(0.5 + 0.8 * np.asarray(points), 0.05, 0.95)


def mean_color_error(points: np.ndarray, colors: np.ndarray) -> float:
    """Mean absolute per-vertex channel error against the reference colors."""
    return float(np.abs(colors - reference_color(points)).mean())
