"""Deformable tetrahedral grid and differentiable marching tetrahedra.

The grid is a Kuhn (6-tet) subdivision of a cubic lattice over the unit box;
all cubes split along the same main diagonal, so shared faces triangulate
consistently and extraction is watertight by construction (crossing-edge
vertices are welded by global edge key).

Surface vertices sit at the linear zero crossing of each sign-changing edge,

    v = (s_b * v_a - s_a * v_b) / (s_b - s_a),

differentiable w.r.t. both the SDF values and the (deformed) endpoint
positions.  Topology (the 16-case sign table) is discrete and carries no
gradient.  The case table itself is derived at import time from the unit
tet: triangles are wound so normals point toward positive SDF.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
import torch

from .errors import GeometryError

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# SDF values with magnitude below this are nudged to +EPS before extraction,
# removing case-table ambiguity at exact zeros.
ZERO_NUDGE = 1e-8

_UNIT_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _build_case_table() -> list[list[tuple[int, int, int]]]:
    """Triangles (as edge-index triples) for each of the 16 sign cases.

    Winding is fixed on the unit tet with edge midpoints so that triangle
    normals point from the inside (negative) vertices toward the outside
    ones; the sign is combinatorial and transfers to any positively
    oriented tet.
    """
    table = []
    for case in range(16):
        inside = [i for i in range(4) if case >> i & 1]
        outside = [i for i in range(4) if not case >> i & 1]
        crossing = [e for e, (a, b) in enumerate(TET_EDGES)
                    if (case >> a & 1) != (case >> b & 1)]
        if not crossing:
            table.append([])
            continue
        mids = {e: _UNIT_TET[TET_EDGES[e][0]] * 0.5
                + _UNIT_TET[TET_EDGES[e][1]] * 0.5 for e in crossing}
        outward = _UNIT_TET[outside].mean(axis=0) - _UNIT_TET[inside].mean(axis=0)
        if len(crossing) == 3:
            polys = [tuple(crossing)]
        else:
            # order the quad so consecutive edges share a tet vertex
            a1, a2 = inside
            b1, b2 = outside
            order = []
            for pair in ((a1, b1), (a1, b2), (a2, b2), (a2, b1)):
                order.append(TET_EDGES.index(tuple(sorted(pair))))
            polys = [(order[0], order[1], order[2]),
                     (order[0], order[2], order[3])]
        tris = []
        for tri in polys:
            p0, p1, p2 = (mids[e] for e in tri)
            normal = np.cross(p1 - p0, p2 - p0)
            if normal @ outward < 0:
                tri = (tri[0], tri[2], tri[1])
            tris.append(tri)
        table.append(tris)
    return table


CASE_TABLE = _build_case_table()

# padded array forms for vectorized gathers: (16, 2, 3) edge ids and (16,) counts
_CASE_NTRI = np.array([len(c) for c in CASE_TABLE], dtype=np.int64)
_CASE_TRIS = np.zeros((16, 2, 3), dtype=np.int64)
for _case, _tris in enumerate(CASE_TABLE):
    for _k, _tri in enumerate(_tris):
        _CASE_TRIS[_case, _k] = _tri


@dataclass(frozen=True)
class TetGrid:
    """Vertices in the unit box and 4-tuples of vertex indices per tet."""

    vertices: np.ndarray       # (V, 3) float64 rest positions
    tets: np.ndarray           # (T, 4) int64, positively oriented
    resolution: int
    cell_size: float

    @property
    def boundary_mask(self) -> np.ndarray:
        """Vertices on the box faces; extraction pins these to 'outside'."""
        n = self.resolution
        idx = np.arange(len(self.vertices))
        iz = idx % (n + 1)
        iy = (idx // (n + 1)) % (n + 1)
        ix = idx // ((n + 1) * (n + 1))
        return ((ix == 0) | (ix == n) | (iy == 0) | (iy == n)
                | (iz == 0) | (iz == n))

    @classmethod
    def build(cls, resolution: int) -> "TetGrid":
        n = resolution
        axis = np.linspace(-0.5, 0.5, n + 1)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

        def vid(ix, iy, iz):
            return (ix * (n + 1) + iy) * (n + 1) + iz

        ix, iy, iz = np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                                 indexing="ij")
        ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
        corner = {}
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner[(dx, dy, dz)] = vid(ix + dx, iy + dy, iz + dz)
        # Kuhn subdivision: six path tets from (0,0,0) to (1,1,1), one per
        # axis permutation; all cubes share the same diagonal direction.
        paths = (((1, 0, 0), (1, 1, 0)), ((1, 0, 0), (1, 0, 1)),
                 ((0, 1, 0), (1, 1, 0)), ((0, 1, 0), (0, 1, 1)),
                 ((0, 0, 1), (1, 0, 1)), ((0, 0, 1), (0, 1, 1)))
        tets = []
        for mid1, mid2 in paths:
            tets.append(np.stack([corner[(0, 0, 0)], corner[mid1],
                                  corner[mid2], corner[(1, 1, 1)]], axis=1))
        tets = np.concatenate(tets, axis=0).astype(np.int64)

        # enforce positive orientation (swap last two indices where negative)
        p = verts[tets]
        vol = np.einsum("ij,ij->i",
                        np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                        p[:, 3] - p[:, 0])
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        return cls(vertices=verts, tets=tets, resolution=n,
                   cell_size=1.0 / n)

    def signed_volumes(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        p = pos[self.tets]
        return np.einsum("ij,ij->i",
                         np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                         p[:, 3] - p[:, 0]) / 6.0


@dataclass
class Mesh:
    """Extracted triangle surface; vertices stay on the autograd graph."""

    vertices: torch.Tensor          # (Vm, 3)
    faces: np.ndarray               # (F, 3) int64
    normals: torch.Tensor           # (Vm, 3) unit, area-weighted
    colors: Optional[torch.Tensor] = None
    # provenance for gradient chaining / debugging
    edge_endpoints: Optional[np.ndarray] = None  # (Vm, 2) global grid ids
    interp_param: Optional[np.ndarray] = None    # (Vm,)
    source_tet: Optional[np.ndarray] = None      # (Vm,) first contributing tet

    @property
    def vertices_np(self) -> np.ndarray:
        return self.vertices.detach().cpu().numpy()

    @property
    def normals_np(self) -> np.ndarray:
        return self.normals.detach().cpu().numpy()

    def edge_array(self) -> np.ndarray:
        """Unique undirected mesh edges, sorted pairs, (E, 2)."""
        e = np.sort(np.concatenate([
            self.faces[:, [0, 1]], self.faces[:, [1, 2]],
            self.faces[:, [2, 0]]]), axis=1)
        n = len(self.vertices)
        keys = np.unique(e[:, 0] * n + e[:, 1])
        return np.stack([keys // n, keys % n], axis=1)

    def euler_characteristic(self) -> int:
        return (len(self.vertices) - len(self.edge_array()) + len(self.faces))

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        e = np.sort(np.concatenate([
            self.faces[:, [0, 1]], self.faces[:, [1, 2]],
            self.faces[:, [2, 0]]]), axis=1)
        n = len(self.vertices)
        _, counts = np.unique(e[:, 0] * n + e[:, 1], return_counts=True)
        return bool(np.all(counts == 2))


def vertex_normals(vertices: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    """Area-weighted vertex normals (deterministic CPU accumulation)."""
    f = torch.from_numpy(faces)
    v0, v1, v2 = vertices[f[:, 0]], vertices[f[:, 1]], vertices[f[:, 2]]
    fn = torch.cross(v1 - v0, v2 - v0, dim=1)  # length = 2 * area
    acc = torch.zeros_like(vertices)
    for k in range(3):
        acc = acc.index_add(0, f[:, k], fn)
    norm = acc.norm(dim=1, keepdim=True).clamp_min(1e-20)
    return acc / norm


def nudge_zeros_np(s: np.ndarray) -> np.ndarray:
    return np.where(np.abs(s) < ZERO_NUDGE, ZERO_NUDGE, s)


def nudge_zeros_torch(s: torch.Tensor) -> torch.Tensor:
    return torch.where(s.abs() < ZERO_NUDGE,
                       torch.full_like(s, ZERO_NUDGE), s)


def marching_tets_from_values(positions: torch.Tensor, sdf: torch.Tensor,
                              tets: np.ndarray,
                              occupancy: Optional[np.ndarray] = None,
                              global_ids: Optional[np.ndarray] = None,
                              tet_ids: Optional[np.ndarray] = None) -> Mesh:
    """Extract a mesh from per-vertex SDF values at (deformed) positions.

    ``occupancy`` optionally pins the sign decisions (used by the fast path,
    where signs come from a cheaper sweep); by default it is sdf < 0 after
    the zero nudge.  ``global_ids``/``tet_ids`` translate provenance back to
    a caller's vertex/tet numbering.
    """
    sdf = nudge_zeros_torch(sdf)
    sdf_np = sdf.detach().cpu().numpy()
    occ = (sdf_np < 0) if occupancy is None else occupancy
    if global_ids is None:
        global_ids = np.arange(len(sdf_np))
    if tet_ids is None:
        tet_ids = np.arange(len(tets))

    occ_t = occ[tets]                                   # (T, 4)
    case = (occ_t * (1, 2, 4, 8)).sum(axis=1)
    valid = (case > 0) & (case < 15)
    vtets = tets[valid]
    vcase = case[valid]
    vtet_ids = tet_ids[valid]
    if len(vtets) == 0:
        return Mesh(vertices=positions.new_zeros((0, 3)),
                    faces=np.zeros((0, 3), dtype=np.int64),
                    normals=positions.new_zeros((0, 3)),
                    edge_endpoints=np.zeros((0, 2), dtype=np.int64),
                    interp_param=np.zeros(0),
                    source_tet=np.zeros(0, dtype=np.int64))

    # unique crossing edges over valid tets, welded by sorted vertex pair
    # (encoded as one scalar key: unique on 1-D ints is much faster)
    all_edges = np.sort(vtets[:, TET_EDGES].reshape(-1, 2), axis=1)  # (6T', 2)
    n_ids = int(all_edges.max()) + 1 if len(all_edges) else 1
    keys = all_edges[:, 0] * n_ids + all_edges[:, 1]
    uniq_keys, inverse = np.unique(keys, return_inverse=True)
    uniq_edges = np.stack([uniq_keys // n_ids, uniq_keys % n_ids], axis=1)
    crossing = occ[uniq_edges[:, 0]] != occ[uniq_edges[:, 1]]
    edge_to_vert = np.full(len(uniq_edges), -1, dtype=np.int64)
    edge_to_vert[crossing] = np.arange(int(crossing.sum()))
    emap = edge_to_vert[inverse].reshape(-1, 6)          # (T', 6)

    cross_edges = uniq_edges[crossing]                   # (Vm, 2) local ids
    # orient each crossing edge as (inside, outside) so t-hat lives in (0, 1)
    a = np.where(occ[cross_edges[:, 0]], cross_edges[:, 0], cross_edges[:, 1])
    b = np.where(occ[cross_edges[:, 0]], cross_edges[:, 1], cross_edges[:, 0])
    a_t = torch.from_numpy(a)
    b_t = torch.from_numpy(b)
    s_a, s_b = sdf[a_t], sdf[b_t]
    t_hat = s_a / (s_a - s_b)
    verts = positions[a_t] + t_hat[:, None] * (positions[b_t] - positions[a_t])

    # faces from the case table
    faces_parts = []
    tet_of_vert = np.full(len(cross_edges), np.iinfo(np.int64).max,
                          dtype=np.int64)
    for n_tri in (1, 2):
        sel = _CASE_NTRI[vcase] == n_tri
        if not np.any(sel):
            continue
        entries = _CASE_TRIS[vcase[sel], :n_tri]         # (S, n_tri, 3)
        local = np.take_along_axis(
            np.repeat(emap[sel], n_tri, axis=0),
            entries.reshape(-1, 3), axis=1)
        faces_parts.append(local)
        np.minimum.at(tet_of_vert, local.ravel(),
                      np.repeat(vtet_ids[sel], n_tri * 3))
    faces = np.concatenate(faces_parts, axis=0)

    normals = vertex_normals(verts, faces)
    return Mesh(
        vertices=verts, faces=faces, normals=normals,
        edge_endpoints=np.stack([global_ids[a], global_ids[b]], axis=1),
        interp_param=t_hat.detach().cpu().numpy(),
        source_tet=tet_of_vert,
    )


def marching_tets(grid: TetGrid, field) -> Mesh:
    """Extract the zero surface of ``field`` over the deformed grid.

    The sign sweep runs on the field's fast no-grad path over all grid
    vertices; SDF values and offsets are then re-evaluated differentiably
    only at vertices incident to crossing edges.
    """
    if getattr(field, "ready", True) is False:
        raise GeometryError(
            "field has no initialization fit report; topology uncertified "
            "(run init_sdf_fit first)")
    s_all = nudge_zeros_np(field.sdf_on_grid(grid))
    # box-boundary vertices count as outside so the surface always closes
    boundary = grid.boundary_mask
    occ = (s_all < 0) & ~boundary

    occ_t = occ[grid.tets]
    case = (occ_t * (1, 2, 4, 8)).sum(axis=1)
    valid = (case > 0) & (case < 15)
    vtets = grid.tets[valid]
    if len(vtets) == 0:
        return marching_tets_from_values(
            torch.zeros((0, 3), dtype=field.torch_dtype),
            torch.zeros(0, dtype=field.torch_dtype),
            np.zeros((0, 4), dtype=np.int64))

    active = np.unique(vtets)
    remap = np.full(len(grid.vertices), -1, dtype=np.int64)
    remap[active] = np.arange(len(active))
    local_tets = remap[vtets]

    rest = torch.tensor(grid.vertices[active], dtype=field.torch_dtype)
    if hasattr(field, "query_grid_subset"):
        s_active, offset_active = field.query_grid_subset(grid, active, rest)
    else:
        s_active, offset_active = field.query(rest)
    # keep values consistent with the pinned-outside boundary occupancy
    b_active = torch.from_numpy(boundary[active])
    s_active = torch.where(b_active, s_active.clamp_min(ZERO_NUDGE), s_active)
    positions = rest + offset_active
    return marching_tets_from_values(
        positions, s_active, local_tets, occupancy=occ[active],
        global_ids=active, tet_ids=np.flatnonzero(valid))


@dataclass
class RegularizerResult:
    normal_consistency: torch.Tensor
    laplacian: torch.Tensor
    isolated_vertices: int


def regularize(mesh: Mesh) -> RegularizerResult:
    """Normal-consistency and Laplacian smoothness losses, both differentiable.

    normal consistency: mean over edge-adjacent face pairs of
    (1 - cos(angle between face normals));
    Laplacian: mean squared distance of each vertex to its 1-ring centroid.
    Isolated vertices are skipped and counted.
    """
    v = mesh.vertices
    f = torch.from_numpy(mesh.faces)
    fn = torch.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]], dim=1)
    fn = fn / fn.norm(dim=1, keepdim=True).clamp_min(1e-20)

    edges = np.sort(np.concatenate([
        mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]],
    ]), axis=1)
    face_of_edge = np.tile(np.arange(len(mesh.faces)), 3)
    n_ids = len(v)
    ekeys = edges[:, 0] * n_ids + edges[:, 1]
    ukeys, inverse, counts = np.unique(ekeys, return_inverse=True,
                                       return_counts=True)
    uniq = np.stack([ukeys // n_ids, ukeys % n_ids], axis=1)
    order = np.argsort(inverse, kind="stable")
    shared = counts == 2
    # for each unique edge with two incident faces, the pair of face ids
    starts = np.zeros(len(uniq), dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    pair_a = face_of_edge[order[starts[shared]]]
    pair_b = face_of_edge[order[starts[shared] + 1]]
    if len(pair_a):
        cos = (fn[torch.from_numpy(pair_a)]
               * fn[torch.from_numpy(pair_b)]).sum(dim=1)
        normal_consistency = (1.0 - cos).mean()
    else:
        normal_consistency = v.new_zeros(())

    neighbor_sum = torch.zeros_like(v)
    deg = torch.zeros(len(v), dtype=v.dtype)
    ea = torch.from_numpy(uniq[:, 0])
    eb = torch.from_numpy(uniq[:, 1])
    neighbor_sum = neighbor_sum.index_add(0, ea, v[eb]).index_add(0, eb, v[ea])
    ones = torch.ones(len(uniq), dtype=v.dtype)
    deg = deg.index_add(0, ea, ones).index_add(0, eb, ones)
    connected = deg > 0
    isolated = int((~connected).sum())
    centroid = neighbor_sum[connected] / deg[connected, None]
    laplacian = ((v[connected] - centroid) ** 2).sum(dim=1).mean()
    return RegularizerResult(normal_consistency, laplacian, isolated)
