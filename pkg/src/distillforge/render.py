"""Camera sampling, differentiable rasterization, landmark projection.

Projection is a pinhole orbit camera looking at the origin (azimuth 0 faces
+z, y is up).  Rasterization uses a hard z-buffer for interior shading --
visibility is selected without gradients, then the winning triangle's
barycentrics and attributes are recomputed on the autograd graph -- and a
soft silhouette for coverage: the mask is sigmoid(d / tau) of the signed
screen-space distance to the nearest silhouette edge, so silhouette
gradients flow only through the mask.  Pixels beyond the band are exact
constants (1 inside, 0 outside).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, GeometryError
from .fields import KeypointSet
from .tetra import Mesh

NEAR_PLANE = 0.05
# Sigmoid temperature: a curved outline gains ~pi^3 tau^2 / 3 px^2 of soft
# area, so tau = 1.0 keeps a 64-px sphere mask within 5% of its true area.
SILHOUETTE_TAU = 1.0       # px
SILHOUETTE_BAND = 6.0      # px, beyond this the mask is an exact constant
LANDMARK_DEPTH_BIAS = 0.02  # box units, occlusion tolerance for keypoints


@dataclass(frozen=True)
class CameraPose:
    distance: float
    azimuth_deg: float
    elevation_deg: float
    fov_deg: float = 40.0
    resolution: int = 64

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigurationError(f"fov must be in (0,180), got {self.fov_deg}")
        if self.resolution < 8:
            raise ConfigurationError(
                f"resolution must be >= 8, got {self.resolution}")

    def cache_key(self):
        return (round(self.distance, 9), round(self.azimuth_deg, 9),
                round(self.elevation_deg, 9), round(self.fov_deg, 9),
                self.resolution)

    def basis(self):
        """(eye, right, up, forward) as float64 arrays."""
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        eye = self.distance * np.array([
            np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        fwd = -eye / np.linalg.norm(eye)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, world_up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
            nr = 1.0
        right = right / nr
        up = np.cross(right, fwd)
        return eye, right, up, fwd


@dataclass(frozen=True)
class CameraRanges:
    """Sampling ranges; a scalar distance keeps it fixed (the default 3)."""

    distance: tuple[float, float] = (3.0, 3.0)
    elevation_deg: tuple[float, float] = (-10.0, 45.0)
    fov_deg: tuple[float, float] = (30.0, 50.0)
    resolution: int = 64

    def __post_init__(self):
        for name in ("distance", "elevation_deg", "fov_deg"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigurationError(f"empty {name} range ({lo}, {hi})")


def sample_camera(rng: np.random.Generator,
                  ranges: CameraRanges = CameraRanges()) -> CameraPose:
    """Azimuth uniform on [0, 360); the rest uniform in their ranges."""
    def _u(pair):
        lo, hi = pair
        return lo if lo == hi else float(rng.uniform(lo, hi))

    return CameraPose(
        distance=_u(ranges.distance),
        azimuth_deg=float(rng.uniform(0.0, 360.0)),
        elevation_deg=_u(ranges.elevation_deg),
        fov_deg=_u(ranges.fov_deg),
        resolution=ranges.resolution,
    )


def view_tag(camera: CameraPose, front_half_angle: float = 45.0,
             side_limit: float = 135.0, overhead_elevation: float = 60.0) -> str:
    """front / side / back by azimuth; overhead overrides at high elevation."""
    if camera.elevation_deg > overhead_elevation:
        return "overhead"
    az = (camera.azimuth_deg + 180.0) % 360.0 - 180.0
    if abs(az) < front_half_angle:
        return "front"
    if abs(az) < side_limit:
        return "side"
    return "back"


def project_points_np(points: np.ndarray, camera: CameraPose):
    """Pixel coordinates and view depth for float64 points (no grad)."""
    eye, right, up, fwd = camera.basis()
    rel = np.atleast_2d(points) - eye
    x = rel @ right
    y = rel @ up
    depth = rel @ fwd
    f = 1.0 / np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    r = camera.resolution
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (x * f / depth + 1.0) * r / 2.0
        py = (1.0 - y * f / depth) * r / 2.0
    return np.stack([px, py], axis=1), depth


def project_points_torch(points: torch.Tensor, camera: CameraPose):
    eye, right, up, fwd = camera.basis()
    dt = points.dtype
    rel = points - torch.tensor(eye, dtype=dt)
    x = rel @ torch.tensor(right, dtype=dt)
    y = rel @ torch.tensor(up, dtype=dt)
    depth = rel @ torch.tensor(fwd, dtype=dt)
    f = 1.0 / np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    r = camera.resolution
    px = (x * f / depth + 1.0) * (r / 2.0)
    py = (1.0 - y * f / depth) * (r / 2.0)
    return torch.stack([px, py], dim=1), depth


@dataclass
class RenderOutput:
    """Images are (R, R[, 3]); normal_map is (n+1)/2 in [0,1], gray background."""

    mask: torch.Tensor
    normal_map: Optional[torch.Tensor] = None
    color: Optional[torch.Tensor] = None
    depth: Optional[np.ndarray] = None
    camera_inside: bool = False

    def mask_np(self) -> np.ndarray:
        return self.mask.detach().cpu().numpy()


def _winner_selection(v2d: np.ndarray, depth: np.ndarray, faces: np.ndarray,
                      res: int):
    """Hard visibility: per-pixel nearest triangle and its id, numpy only.

    Returns (pixel_flat_indices, winning_tri_ids) plus the per-triangle
    keep-mask used (near-plane culling).
    """
    keep = (depth[faces] > NEAR_PLANE).all(axis=1)
    tri_ids = np.flatnonzero(keep)
    if len(tri_ids) == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), keep)
    tri = v2d[faces[tri_ids]]                      # (T, 3, 2)
    lo = np.clip(np.floor(tri.min(axis=1)), 0, res - 1).astype(np.int64)
    hi = np.clip(np.ceil(tri.max(axis=1)), 0, res).astype(np.int64)
    w = np.maximum(hi[:, 0] - lo[:, 0], 0)
    h = np.maximum(hi[:, 1] - lo[:, 1], 0)
    counts = w * h
    nz = counts > 0
    tri_ids, tri, lo, w, h, counts = (tri_ids[nz], tri[nz], lo[nz], w[nz],
                                      h[nz], counts[nz])
    if len(tri_ids) == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), keep)
    rep = np.repeat(np.arange(len(tri_ids)), counts)
    offs = np.arange(counts.sum()) - np.repeat(
        np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    cx = lo[rep, 0] + offs % w[rep]
    cy = lo[rep, 1] + offs // w[rep]
    px = cx + 0.5
    py = cy + 0.5

    a, b, c = tri[rep, 0], tri[rep, 1], tri[rep, 2]
    den = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
           - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    w0 = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px))
    w1 = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px))
    w2 = den - w0 - w1
    ok = np.abs(den) > 1e-14
    s = np.sign(den)
    inside = ok & (w0 * s >= 0) & (w1 * s >= 0) & (w2 * s >= 0)
    rep, cx, cy = rep[inside], cx[inside], cy[inside]
    bw = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / den[inside, None]
    d = (bw * depth[faces[tri_ids[rep]]]).sum(axis=1)
    flat = cy * res + cx
    order = np.lexsort((tri_ids[rep], d, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    sel = order[first]
    return flat[sel], tri_ids[rep[sel]], keep


def _point_segment_distance_np(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-18),
                0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return np.sqrt((d * d).sum(-1))


def _point_segment_distance_torch(p, a, b):
    ab = b - a
    t = (((p - a) * ab).sum(-1) / ((ab * ab).sum(-1)).clamp_min(1e-18)
         ).clamp(0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return ((d * d).sum(-1)).clamp_min(1e-30).sqrt()


def _silhouette_edges(v2d: np.ndarray, faces: np.ndarray,
                      keep: np.ndarray) -> np.ndarray:
    """Edges on the projected outline: facing flip or border, as vertex pairs."""
    kept = faces[keep]
    if len(kept) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    a, b, c = v2d[kept[:, 0]], v2d[kept[:, 1]], v2d[kept[:, 2]]
    area = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    facing = area > 0
    edges = np.sort(np.concatenate([kept[:, [0, 1]], kept[:, [1, 2]],
                                    kept[:, [2, 0]]]), axis=1)
    n = int(edges.max()) + 1
    keys = edges[:, 0] * n + edges[:, 1]
    face_facing = np.tile(facing, 3)
    order = np.argsort(keys, kind="stable")
    ks = keys[order]
    start = np.ones(len(ks), dtype=bool)
    start[1:] = ks[1:] != ks[:-1]
    group_ids = np.cumsum(start) - 1
    n_groups = group_ids[-1] + 1
    cnt = np.bincount(group_ids, minlength=n_groups)
    any_front = np.zeros(n_groups, dtype=bool)
    all_front = np.ones(n_groups, dtype=bool)
    np.logical_or.at(any_front, group_ids, face_facing[order])
    np.logical_and.at(all_front, group_ids, face_facing[order])
    sil = (cnt == 1) | (any_front & ~all_front)
    first_pos = np.zeros(n_groups, dtype=np.int64)
    first_pos[group_ids[start]] = order[start]
    return edges[first_pos[sil]]


def rasterize(mesh: Mesh, camera: CameraPose, mode: str = "normal",
              tau: float = SILHOUETTE_TAU) -> RenderOutput:
    """Render normals / colors / mask with the gradient contract.

    Interior pixels: gradients flow through barycentrics to vertex positions
    and through interpolation to vertex attributes.  Coverage: gradients flow
    only through the soft mask to silhouette-edge endpoints.
    """
    if mode not in ("normal", "color", "mask"):
        raise ConfigurationError(f"unknown rasterize mode {mode!r}")
    if len(mesh.faces) == 0:
        raise GeometryError("cannot rasterize an empty mesh")
    if mode == "color" and mesh.colors is None:
        raise DimensionError("color mode needs per-vertex colors on the mesh")

    res = camera.resolution
    dt = mesh.vertices.dtype
    v2d_t, depth_t = project_points_torch(mesh.vertices, camera)
    v2d = v2d_t.detach().cpu().numpy().astype(np.float64)
    depth = depth_t.detach().cpu().numpy().astype(np.float64)
    camera_inside = bool((depth <= NEAR_PLANE).any())

    flat_pix, win_tri, keep = _winner_selection(v2d, depth, mesh.faces, res)

    # --- differentiable interior interpolation on the winners ---
    out_normal = out_color = None
    if mode == "normal":
        out_normal = torch.full((res, res, 3), 0.5, dtype=dt)
    elif mode == "color":
        out_color = torch.zeros((res, res, 3), dtype=dt)
    depth_img = np.full((res, res), np.inf)
    if len(flat_pix):
        f = torch.from_numpy(mesh.faces[win_tri])
        a = v2d_t[f[:, 0]]
        b = v2d_t[f[:, 1]]
        c = v2d_t[f[:, 2]]
        pxc = torch.tensor(np.stack([flat_pix % res + 0.5,
                                     flat_pix // res + 0.5], axis=1), dtype=dt)
        den = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
               - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        w0 = ((b[:, 0] - pxc[:, 0]) * (c[:, 1] - pxc[:, 1])
              - (b[:, 1] - pxc[:, 1]) * (c[:, 0] - pxc[:, 0])) / den
        w1 = ((c[:, 0] - pxc[:, 0]) * (a[:, 1] - pxc[:, 1])
              - (c[:, 1] - pxc[:, 1]) * (a[:, 0] - pxc[:, 0])) / den
        w2 = 1.0 - w0 - w1
        bw = torch.stack([w0, w1, w2], dim=1)[:, :, None]

        def interp(attr):
            return (bw * attr[f]).sum(dim=1)

        rows = torch.from_numpy(flat_pix // res)
        cols = torch.from_numpy(flat_pix % res)
        if mode == "normal":
            vals = (interp(mesh.normals) + 1.0) * 0.5
            out_normal = out_normal.index_put((rows, cols), vals)
        elif mode == "color":
            vals = interp(mesh.colors)
            out_color = out_color.index_put((rows, cols), vals)
        dwin = (bw.detach().numpy()[:, :, 0] * depth[mesh.faces[win_tri]]).sum(1)
        depth_img[flat_pix // res, flat_pix % res] = dwin

    # --- soft silhouette mask ---
    mask = torch.zeros((res, res), dtype=dt)
    sil = _silhouette_edges(v2d, mesh.faces, keep)
    covered = np.zeros(res * res, dtype=bool)
    covered[flat_pix] = True
    if len(sil):
        band = SILHOUETTE_BAND
        pa, pb = v2d[sil[:, 0]], v2d[sil[:, 1]]
        lo = np.clip(np.floor(np.minimum(pa, pb) - band), 0, res - 1).astype(np.int64)
        hi = np.clip(np.ceil(np.maximum(pa, pb) + band), 0, res).astype(np.int64)
        w = np.maximum(hi[:, 0] - lo[:, 0], 0)
        h = np.maximum(hi[:, 1] - lo[:, 1], 0)
        counts = w * h
        rep = np.repeat(np.arange(len(sil)), counts)
        offs = np.arange(counts.sum()) - np.repeat(
            np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        cx = lo[rep, 0] + offs % w[rep]
        cy = lo[rep, 1] + offs // w[rep]
        p = np.stack([cx + 0.5, cy + 0.5], axis=1)
        dists = _point_segment_distance_np(p, pa[rep], pb[rep])
        flat = cy * res + cx
        order = np.lexsort((rep, dists, flat))
        fs = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = fs[1:] != fs[:-1]
        sel = order[first]
        in_band = dists[sel] <= band
        sel = sel[in_band]
        pix_sel = flat[sel]
        edge_sel = rep[sel]
        # differentiable distance for the winning (pixel, edge) pairs
        ea = v2d_t[torch.from_numpy(sil[edge_sel, 0])]
        eb = v2d_t[torch.from_numpy(sil[edge_sel, 1])]
        pp = torch.tensor(np.stack([pix_sel % res + 0.5,
                                    pix_sel // res + 0.5], axis=1), dtype=dt)
        dist_t = _point_segment_distance_torch(pp, ea, eb)
        sign = torch.tensor(np.where(covered[pix_sel], 1.0, -1.0), dtype=dt)
        vals = torch.sigmoid(sign * dist_t / tau)
        mask = mask.index_put((torch.from_numpy(pix_sel // res),
                               torch.from_numpy(pix_sel % res)), vals)
        # covered pixels beyond the band are exact ones
        far_covered = covered.copy()
        far_covered[pix_sel] = False
        fc = np.flatnonzero(far_covered)
        if len(fc):
            mask = mask.index_put(
                (torch.from_numpy(fc // res), torch.from_numpy(fc % res)),
                torch.ones(len(fc), dtype=dt))

    return RenderOutput(mask=mask, normal_map=out_normal, color=out_color,
                        depth=depth_img, camera_inside=camera_inside)


def composite(foreground: torch.Tensor, mask: torch.Tensor,
              background: float) -> torch.Tensor:
    """fg * mask + bg * (1 - mask), channelwise."""
    return foreground * mask[..., None] + background * (1.0 - mask[..., None])


def render_reference_np(vertices: np.ndarray, faces: np.ndarray,
                        attributes: np.ndarray, camera: CameraPose,
                        mode: str, background: float,
                        tau: float = SILHOUETTE_TAU) -> np.ndarray:
    """Gradient-free twin of rasterize + composite, all numpy.

    Same visibility, interpolation and soft-mask math as the torch path;
    used for oracle anchor renders where no gradients are needed.
    ``attributes`` are per-vertex normals (mode 'normal') or colors.
    """
    eye, right, up, fwd = camera.basis()
    rel = vertices - eye
    depth = rel @ fwd
    f = 1.0 / np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    res = camera.resolution
    with np.errstate(divide="ignore", invalid="ignore"):
        px = ((rel @ right) * f / depth + 1.0) * res / 2.0
        py = (1.0 - (rel @ up) * f / depth) * res / 2.0
    v2d = np.stack([px, py], axis=1)

    flat_pix, win_tri, keep = _winner_selection(v2d, depth, faces, res)
    img = np.full((res, res, 3), 0.5 if mode == "normal" else 0.0)
    if len(flat_pix):
        tri = faces[win_tri]
        a, b, c = v2d[tri[:, 0]], v2d[tri[:, 1]], v2d[tri[:, 2]]
        pxc = np.stack([flat_pix % res + 0.5, flat_pix // res + 0.5], axis=1)
        den = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
               - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
        w0 = ((b[:, 0] - pxc[:, 0]) * (c[:, 1] - pxc[:, 1])
              - (b[:, 1] - pxc[:, 1]) * (c[:, 0] - pxc[:, 0])) / den
        w1 = ((c[:, 0] - pxc[:, 0]) * (a[:, 1] - pxc[:, 1])
              - (c[:, 1] - pxc[:, 1]) * (a[:, 0] - pxc[:, 0])) / den
        w2 = 1.0 - w0 - w1
        bw = np.stack([w0, w1, w2], axis=1)[:, :, None]
        vals = (bw * attributes[tri]).sum(axis=1)
        if mode == "normal":
            vals = (vals + 1.0) * 0.5
        img[flat_pix // res, flat_pix % res] = vals

    mask = np.zeros((res, res))
    covered = np.zeros(res * res, dtype=bool)
    covered[flat_pix] = True
    sil = _silhouette_edges(v2d, faces, keep)
    if len(sil):
        band = SILHOUETTE_BAND
        pa, pb = v2d[sil[:, 0]], v2d[sil[:, 1]]
        lo = np.clip(np.floor(np.minimum(pa, pb) - band), 0, res - 1).astype(np.int64)
        hi = np.clip(np.ceil(np.maximum(pa, pb) + band), 0, res).astype(np.int64)
        w = np.maximum(hi[:, 0] - lo[:, 0], 0)
        h = np.maximum(hi[:, 1] - lo[:, 1], 0)
        counts = w * h
        rep = np.repeat(np.arange(len(sil)), counts)
        offs = np.arange(counts.sum()) - np.repeat(
            np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        cx = lo[rep, 0] + offs % w[rep]
        cy = lo[rep, 1] + offs // w[rep]
        p = np.stack([cx + 0.5, cy + 0.5], axis=1)
        dists = _point_segment_distance_np(p, pa[rep], pb[rep])
        flat = cy * res + cx
        order = np.lexsort((rep, dists, flat))
        fs = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = fs[1:] != fs[:-1]
        sel = order[first]
        sel = sel[dists[sel] <= band]
        pix_sel = flat[sel]
        sgn = np.where(covered[pix_sel], 1.0, -1.0)
        vals = 1.0 / (1.0 + np.exp(-sgn * dists[sel] / tau))
        mask[pix_sel // res, pix_sel % res] = vals
        far = covered.copy()
        far[pix_sel] = False
        mask[far.reshape(res, res)] = 1.0
    return img * mask[..., None] + background * (1.0 - mask[..., None])


# fixed splat palette; unknown names fall back on a golden-angle hue
LANDMARK_PALETTE = {
    "nose-tip": (1.0, 0.2, 0.2),
    "eye-l": (0.2, 1.0, 0.2),
    "eye-r": (0.2, 0.8, 1.0),
    "mouth-l": (1.0, 0.8, 0.2),
    "mouth-r": (1.0, 0.5, 0.8),
    "chin": (0.6, 0.4, 1.0),
    "ear-l": (0.4, 1.0, 0.8),
    "ear-r": (0.9, 0.9, 0.3),
}
CONTOUR_COLOR = (1.0, 1.0, 1.0)
SPLAT_RADIUS = 2.0  # px


def _palette(name: str):
    if name in LANDMARK_PALETTE:
        return LANDMARK_PALETTE[name]
    h = (hash(name) % 360) / 360.0
    return (0.5 + 0.5 * np.cos(2 * np.pi * h),
            0.5 + 0.5 * np.cos(2 * np.pi * (h + 1 / 3)),
            0.5 + 0.5 * np.cos(2 * np.pi * (h + 2 / 3)))


@dataclass
class LandmarkMap:
    """Projected keypoints plus the contour polyline; raster built lazily."""

    points: dict                    # name -> (px, py), visible ones only
    contour_px: np.ndarray          # (K, 2)
    contour_only: bool
    camera: CameraPose
    _image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = self._rasterize()
        return self._image

    def _rasterize(self) -> np.ndarray:
        res = self.camera.resolution
        img = np.zeros((res, res, 3))
        # contour polyline, 1 px, closed ring
        k = len(self.contour_px)
        for i in range(k):
            a = self.contour_px[i]
            b = self.contour_px[(i + 1) % k]
            n = max(int(np.ceil(np.abs(b - a).max() * 2)), 1)
            for t in np.linspace(0.0, 1.0, n + 1):
                x, y = np.floor(a + t * (b - a)).astype(int)
                if 0 <= x < res and 0 <= y < res:
                    img[y, x] = CONTOUR_COLOR
        if not self.contour_only:
            yy, xx = np.mgrid[0:res, 0:res]
            for name, (px, py) in sorted(self.points.items()):
                disc = (xx + 0.5 - px) ** 2 + (yy + 0.5 - py) ** 2 <= SPLAT_RADIUS ** 2
                img[disc] = _palette(name)
        return img


def project_landmarks(keypoints: KeypointSet, camera: CameraPose,
                      view: str, depth_map: Optional[np.ndarray] = None,
                      depth_bias: float = LANDMARK_DEPTH_BIAS) -> LandmarkMap:
    """Project keypoints with the rasterizer's pinhole model.

    Facial keypoints occluded by more than ``depth_bias`` (tested against the
    supplied depth map) are omitted; back views keep only the contour.
    """
    contour_only = view == "back"
    res = camera.resolution
    pix_c, _ = project_points_np(keypoints.contour, camera)
    points: dict = {}
    if not contour_only:
        names = list(keypoints.named)
        pts = np.array([keypoints.named[n] for n in names])
        pix, depth = project_points_np(pts, camera)
        for i, name in enumerate(names):
            x, y = pix[i]
            if not (0 <= x < res and 0 <= y < res) or depth[i] <= NEAR_PLANE:
                continue
            if depth_map is not None:
                zbuf = depth_map[min(int(y), res - 1), min(int(x), res - 1)]
                if depth[i] > zbuf + depth_bias:
                    continue
            points[name] = (float(x), float(y))
    return LandmarkMap(points=points, contour_px=pix_c,
                       contour_only=contour_only, camera=camera)
