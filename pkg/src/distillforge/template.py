"""Analytic head-like template: primitive union SDF plus named keypoints.

The template stands in for a statistical head model: an ellipsoid cranium,
a frustum neck, and a spherical nose bump, combined with min().  Primitive
distances are exact (the ellipsoid via bisection to machine precision), so
initialization fits and keypoint placement can be tested against hard
tolerances.  Keypoints (eyes, nose tip, mouth corners, chin, ears, plus a
16-point face-contour ring) all lie on the union's zero level set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np


class Ellipsoid:
    def __init__(self, center, radii):
        self.center = np.asarray(center, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact distance via the standard root-find for the foot point.

        For q in the first octant the closest surface point is
        x_i = r_i^2 q_i / (t + r_i^2) with t the unique root of
        sum_i (r_i q_i / (t + r_i^2))^2 = 1 on (-min r_i^2, inf).
        """
        q = np.abs(np.asarray(points, dtype=np.float64) - self.center)
        q = np.maximum(q, 1e-12)  # keeps the root bracket non-degenerate
        r2 = self.radii ** 2
        t_lo = np.full(len(q), -r2.min() + 1e-15)
        t_hi = np.linalg.norm(q, axis=1) * self.radii.max() + r2.max()

        def f(t):
            return ((self.radii * q / (t[:, None] + r2)) ** 2).sum(axis=1) - 1.0

        while np.any(f(t_hi) > 0):
            t_hi = t_hi * 2.0 + 1.0
        for _ in range(52):
            mid = 0.5 * (t_lo + t_hi)
            pos = f(mid) > 0
            t_lo = np.where(pos, mid, t_lo)
            t_hi = np.where(pos, t_hi, mid)
        t = 0.5 * (t_lo + t_hi)
        foot = r2 * q / (t[:, None] + r2)
        dist = np.linalg.norm(q - foot, axis=1)
        inside = ((q / self.radii) ** 2).sum(axis=1) < 1.0
        return np.where(inside, -dist, dist)

    def surface_point(self, direction) -> np.ndarray:
        """Point on the ellipsoid along a unit direction in parameter space."""
        d = np.asarray(direction, dtype=np.float64)
        return self.center + self.radii * d / np.linalg.norm(d)


class Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=1) - self.radius


class Frustum:
    """Capped cone around a vertical (y) axis: exact signed distance."""

    def __init__(self, center, half_height, r_bottom, r_top):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_height = float(half_height)
        self.r_bottom = float(r_bottom)
        self.r_top = float(r_top)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.center
        qx = np.hypot(p[:, 0], p[:, 2])
        qy = p[:, 1]
        h, r1, r2 = self.half_height, self.r_bottom, self.r_top
        # 2D capped-cone distance in the (radial, axial) half-plane
        cax = qx - np.minimum(qx, np.where(qy < 0.0, r1, r2))
        cay = np.abs(qy) - h
        k2 = np.array([r2 - r1, 2.0 * h])
        dk = float(k2 @ k2)
        tt = np.clip(((r2 - qx) * k2[0] + (h - qy) * k2[1]) / dk, 0.0, 1.0)
        cbx = qx - r2 + k2[0] * tt
        cby = qy - h + k2[1] * tt
        inside = (cbx < 0.0) & (cay < 0.0)
        d2 = np.minimum(cax ** 2 + cay ** 2, cbx ** 2 + cby ** 2)
        return np.where(inside, -1.0, 1.0) * np.sqrt(d2)


@dataclass
class TemplateSDF:
    """Union of primitives with named keypoints pinned to the zero set."""

    primitives: list
    keypoints: Dict[str, np.ndarray]
    contour: np.ndarray  # (K, 3) ring of face-contour points

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        values = np.stack([p.sdf(points) for p in self.primitives])
        return values.min(axis=0)

    def all_keypoints(self) -> Dict[str, np.ndarray]:
        out = dict(self.keypoints)
        for i, p in enumerate(self.contour):
            out[f"contour-{i:02d}"] = p
        return out


def _on_ellipsoid_z(ell: Ellipsoid, x: float, y: float) -> np.ndarray:
    """Point on the ellipsoid front (positive z) above the given (x, y)."""
    rel = np.array([x, y]) - ell.center[:2]
    rest = 1.0 - (rel[0] / ell.radii[0]) ** 2 - (rel[1] / ell.radii[1]) ** 2
    z = ell.center[2] + ell.radii[2] * np.sqrt(rest)
    return np.array([x, y, z])


def head_template(nose_radius: float = 0.05) -> TemplateSDF:
    """The default generation template; ``nose_radius`` is the edit handle."""
    cranium = Ellipsoid(center=(0.0, 0.06, 0.0), radii=(0.27, 0.32, 0.28))
    neck = Frustum(center=(0.0, -0.32, -0.04), half_height=0.12,
                   r_bottom=0.14, r_top=0.11)
    nose_center = np.array([0.0, 0.0, 0.28])
    nose = Sphere(center=nose_center, radius=nose_radius)

    keypoints = {
        "nose-tip": nose_center + np.array([0.0, 0.0, nose_radius]),
        "eye-l": _on_ellipsoid_z(cranium, -0.10, 0.10),
        "eye-r": _on_ellipsoid_z(cranium, 0.10, 0.10),
        "mouth-l": _on_ellipsoid_z(cranium, -0.06, -0.12),
        "mouth-r": _on_ellipsoid_z(cranium, 0.06, -0.12),
        "chin": _on_ellipsoid_z(cranium, 0.0, -0.225),
        "ear-l": np.array([-0.27, 0.06, 0.0]),
        "ear-r": np.array([0.27, 0.06, 0.0]),
    }
    # face-contour ring: ellipse section of the cranium in the z = 0.1 plane
    z_ring = 0.1
    shrink = np.sqrt(1.0 - (z_ring / 0.28) ** 2)
    theta = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    contour = np.stack([
        0.27 * shrink * np.cos(theta),
        0.06 + 0.32 * shrink * np.sin(theta),
        np.full_like(theta, z_ring),
    ], axis=1)
    return TemplateSDF([cranium, neck, nose], keypoints, contour)


def ellipsoid_nose_target(nose_radius: float = 0.06) -> TemplateSDF:
    """Recovery target: a neck-free ellipsoid with a larger nose bump."""
    cranium = Ellipsoid(center=(0.0, 0.02, 0.0), radii=(0.24, 0.27, 0.25))
    nose_center = np.array([0.0, -0.02, 0.25])
    nose = Sphere(center=nose_center, radius=nose_radius)
    keypoints = {
        "nose-tip": nose_center + np.array([0.0, 0.0, nose_radius]),
        "eye-l": _on_ellipsoid_z(cranium, -0.09, 0.08),
        "eye-r": _on_ellipsoid_z(cranium, 0.09, 0.08),
        "mouth-l": _on_ellipsoid_z(cranium, -0.05, -0.10),
        "mouth-r": _on_ellipsoid_z(cranium, 0.05, -0.10),
        "chin": _on_ellipsoid_z(cranium, 0.0, -0.19),
        "ear-l": np.array([-0.24, 0.02, 0.0]),
        "ear-r": np.array([0.24, 0.02, 0.0]),
    }
    z_ring = 0.09
    shrink = np.sqrt(1.0 - (z_ring / 0.25) ** 2)
    theta = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    contour = np.stack([
        0.24 * shrink * np.cos(theta),
        0.02 + 0.27 * shrink * np.sin(theta),
        np.full_like(theta, z_ring),
    ], axis=1)
    return TemplateSDF([cranium, nose], keypoints, contour)


def sphere_template(radius: float = 0.3) -> TemplateSDF:
    """Plain sphere: the standard geometry-kernel test case."""
    sphere = Sphere(center=(0.0, 0.0, 0.0), radius=radius)
    theta = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    contour = np.stack([radius * np.cos(theta), radius * np.sin(theta),
                        np.zeros_like(theta)], axis=1)
    keypoints = {"nose-tip": np.array([0.0, 0.0, radius])}
    return TemplateSDF([sphere], keypoints, contour)
