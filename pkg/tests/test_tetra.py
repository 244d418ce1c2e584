"""Grid construction, the marching-tets kernel, gradients, regularizers."""

import numpy as np
import pytest
import torch

from distillforge.errors import GeometryError
from distillforge.fields import (OFFSET_CLAMP_FACTOR, AnalyticSDFField,
                                 ImplicitField)
from distillforge.hashgrid import HashConfig
from distillforge.template import head_template, sphere_template
from distillforge.tetra import (CASE_TABLE, TetGrid, marching_tets,
                                marching_tets_from_values, regularize,
                                vertex_normals)

GRID32 = TetGrid.build(32)


class TestTetGrid:
    def test_counts_and_ranges(self):
        g = TetGrid.build(4)
        assert len(g.vertices) == 5 ** 3
        assert len(g.tets) == 6 * 4 ** 3
        assert g.tets.min() == 0 and g.tets.max() == len(g.vertices) - 1

    def test_positive_volumes_at_rest(self):
        vols = GRID32.signed_volumes(GRID32.vertices)
        assert np.all(vols > 0)

    def test_boundary_mask(self):
        g = TetGrid.build(4)
        m = g.boundary_mask
        on_box = np.abs(np.abs(g.vertices).max(axis=1) - 0.5) < 1e-12
        assert np.array_equal(m, on_box)


class TestCaseTable:
    def test_triangle_counts(self):
        # 0 inside or 4 inside -> nothing; 1 or 3 -> one; 2 -> two
        for case in range(16):
            n_in = bin(case).count("1")
            want = {0: 0, 1: 1, 2: 2, 3: 1, 4: 0}[n_in]
            assert len(CASE_TABLE[case]) == want

    @pytest.mark.parametrize("case", range(1, 15))
    def test_single_tet_orientation(self, case):
        # normals must point from inside (negative sdf) toward outside
        pos = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                            [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                           dtype=torch.float64)
        sdf = torch.tensor([-0.5 if case >> i & 1 else 0.5 for i in range(4)],
                           dtype=torch.float64)
        mesh = marching_tets_from_values(pos, sdf,
                                         np.array([[0, 1, 2, 3]]))
        assert len(mesh.faces) == len(CASE_TABLE[case])
        inside_pts = pos.numpy()[[i for i in range(4) if case >> i & 1]]
        centroid_in = inside_pts.mean(axis=0)
        v = mesh.vertices_np
        for f in mesh.faces:
            a, b, c = v[f]
            n = np.cross(b - a, c - a)
            assert n @ (a - centroid_in) > 0  # outward w.r.t. the inside side

    def test_all_same_sign_empty(self):
        pos = torch.tensor(np.random.default_rng(0).standard_normal((4, 3)))
        for s in (1.0, -1.0):
            mesh = marching_tets_from_values(pos, torch.full((4,), s),
                                             np.array([[0, 1, 2, 3]]))
            assert len(mesh.faces) == 0 and len(mesh.vertices) == 0


class TestSphereExtraction:
    def setup_method(self):
        self.mesh = marching_tets(GRID32, AnalyticSDFField(sphere_template(0.3).sdf))

    def test_watertight(self):
        assert self.mesh.is_watertight()

    def test_euler_characteristic_two(self):
        assert self.mesh.euler_characteristic() == 2

    def test_vertices_near_sphere(self):
        r = np.linalg.norm(self.mesh.vertices_np, axis=1)
        cell_diag = np.sqrt(3) / 32
        assert np.abs(r - 0.3).max() <= cell_diag

    def test_normals_outward_and_unit(self):
        v, n = self.mesh.vertices_np, self.mesh.normals_np
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
        assert np.all(np.einsum("ij,ij->i", v, n) > 0)

    def test_interp_params_in_unit_range(self):
        t = self.mesh.interp_param
        assert np.all((t >= 0) & (t <= 1))

    def test_provenance_edges_cross_surface(self):
        ends = GRID32.vertices[self.mesh.edge_endpoints]
        s = sphere_template(0.3).sdf
        sa = s(ends[:, 0])
        sb = s(ends[:, 1])
        assert np.all(sa < 0) and np.all(sb > 0)


class TestExtractionGenericFields:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_smooth_fields_watertight(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(-0.15, 0.15, 3)
        r = rng.uniform(0.15, 0.35)
        amp = rng.uniform(0, 0.05)

        def sdf(p):
            return (np.linalg.norm(p - c, axis=1) - r
                    + amp * np.sin(9 * p[:, 0]) * np.sin(7 * p[:, 1]))

        mesh = marching_tets(GRID32, AnalyticSDFField(sdf))
        assert len(mesh.faces) > 0
        assert mesh.is_watertight()

    def test_zero_at_vertex_is_nudged(self):
        # an exact zero on a grid vertex must not crash or open the mesh
        g = TetGrid.build(8)

        def sdf(p):
            return np.linalg.norm(p, axis=1) - 0.25  # 0.25 = 2 cells exactly

        mesh = marching_tets(g, AnalyticSDFField(sdf))
        assert mesh.is_watertight()

    def test_unfit_field_refused(self):
        field = ImplicitField(HashConfig(level_count=2, table_size=2 ** 10))
        with pytest.raises(GeometryError, match="init_sdf_fit"):
            marching_tets(GRID32, field)


class TestMarchingTetsGradients:
    def _random_tet_case(self, rng):
        pos = rng.standard_normal((4, 3))
        # ensure non-degenerate and mixed signs away from zero
        while True:
            sdf = rng.standard_normal(4)
            if np.abs(sdf).min() > 0.1 and 0 < (sdf < 0).sum() < 4:
                return pos, sdf

    @pytest.mark.parametrize("seed", range(20))
    def test_vertex_gradients_match_fd(self, seed):
        rng = np.random.default_rng(seed)
        pos_np, sdf_np = self._random_tet_case(rng)
        tets = np.array([[0, 1, 2, 3]])
        coeff = None

        def extract(pos_v, sdf_v, need_grad):
            pos = torch.tensor(pos_np, dtype=torch.float64,
                               requires_grad=need_grad)
            sdf = torch.tensor(sdf_np, dtype=torch.float64,
                               requires_grad=need_grad)
            if pos_v is not None:
                pos = torch.tensor(pos_v, dtype=torch.float64)
            if sdf_v is not None:
                sdf = torch.tensor(sdf_v, dtype=torch.float64)
            mesh = marching_tets_from_values(pos, sdf, tets)
            probe = (mesh.vertices * coeff).sum()
            return probe, pos, sdf

        # fixed probe coefficients
        mesh0 = marching_tets_from_values(
            torch.tensor(pos_np), torch.tensor(sdf_np), tets)
        coeff = torch.tensor(np.random.default_rng(100 + seed)
                             .standard_normal(mesh0.vertices.shape))

        probe, pos, sdf = extract(None, None, True)
        probe.backward()
        g_sdf = sdf.grad.numpy()
        g_pos = pos.grad.numpy()

        h = 1e-6
        for i in range(4):
            sp, sm = sdf_np.copy(), sdf_np.copy()
            sp[i] += h
            sm[i] -= h
            fd = (extract(None, sp, False)[0].item()
                  - extract(None, sm, False)[0].item()) / (2 * h)
            assert fd == pytest.approx(g_sdf[i], rel=1e-3, abs=1e-9)
        for i in range(4):
            for k in range(3):
                pp, pm = pos_np.copy(), pos_np.copy()
                pp[i, k] += h
                pm[i, k] -= h
                fd = (extract(pp, None, False)[0].item()
                      - extract(pm, None, False)[0].item()) / (2 * h)
                assert fd == pytest.approx(g_pos[i, k], rel=1e-3, abs=1e-9)


class TestOffsetClampInversion:
    def test_adversarial_displacements_keep_positive_volume(self):
        # worst-case search on the path tet at the default clamp factor
        tet = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]], float)

        def vol(p):
            return np.cross(p[1] - p[0], p[2] - p[0]) @ (p[3] - p[0]) / 6.0

        r = OFFSET_CLAMP_FACTOR
        worst = np.inf
        for seed in range(10):
            rng = np.random.default_rng(seed)
            d = rng.standard_normal((4, 3))
            d *= r / np.linalg.norm(d, axis=1, keepdims=True)
            for _ in range(100):
                for i in range(4):
                    g = np.zeros(3)
                    for k in range(3):
                        e = np.zeros((4, 3))
                        e[i, k] = 1e-7
                        g[k] = (vol(tet + d + e) - vol(tet + d - e)) / 2e-7
                    d[i] = -g / np.linalg.norm(g) * r
            worst = min(worst, vol(tet + d))
        assert worst > 0

    @pytest.mark.parametrize("seed", range(3))
    def test_random_field_offsets_never_invert(self, seed):
        g = TetGrid.build(8)
        field = ImplicitField(
            HashConfig(level_count=4, table_size=2 ** 12),
            offset_clamp_radius=OFFSET_CLAMP_FACTOR * g.cell_size,
            rng=np.random.default_rng(seed))
        # crank the offset head so the clamp is actually exercised
        with torch.no_grad():
            for w in field.mlp_off.weights:
                w *= 300.0
        offs = field.offsets_np(g.vertices)
        radius = OFFSET_CLAMP_FACTOR * g.cell_size
        assert np.linalg.norm(offs, axis=1).max() <= radius * (1 + 1e-12)
        vols = g.signed_volumes(g.vertices + offs)
        assert np.all(vols > 0)


class TestRegularizers:
    def _sphere_mesh(self):
        return marching_tets(GRID32, AnalyticSDFField(sphere_template(0.3).sdf))

    def test_flat_patch_zero_normal_consistency(self):
        # two coplanar triangles sharing an edge
        v = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                          [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
                         dtype=torch.float64)
        f = np.array([[0, 1, 2], [1, 3, 2]])
        from distillforge.tetra import Mesh
        mesh = Mesh(vertices=v, faces=f, normals=vertex_normals(v, f))
        res = regularize(mesh)
        assert float(res.normal_consistency) == pytest.approx(0.0, abs=1e-15)

    def test_displaced_vertex_increases_both(self):
        mesh = self._sphere_mesh()
        base = regularize(mesh)
        bumped = mesh.vertices.clone()
        bumped[17] = bumped[17] * 1.15
        from distillforge.tetra import Mesh
        mesh2 = Mesh(vertices=bumped, faces=mesh.faces,
                     normals=vertex_normals(bumped, mesh.faces))
        res2 = regularize(mesh2)
        assert float(res2.normal_consistency) > float(base.normal_consistency)
        assert float(res2.laplacian) > float(base.laplacian)

    def test_isolated_vertices_counted(self):
        v = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                          [0.0, 1.0, 0.0], [9.0, 9.0, 9.0]],
                         dtype=torch.float64)
        f = np.array([[0, 1, 2]])
        from distillforge.tetra import Mesh
        mesh = Mesh(vertices=v, faces=f, normals=vertex_normals(v, f))
        assert regularize(mesh).isolated_vertices == 1

    def test_losses_differentiable(self):
        g = TetGrid.build(8)
        sdf_np = sphere_template(0.3).sdf(g.vertices)
        pos = torch.tensor(g.vertices, dtype=torch.float64, requires_grad=True)
        sdf = torch.tensor(sdf_np, dtype=torch.float64, requires_grad=True)
        mesh = marching_tets_from_values(pos, sdf, g.tets)
        res = regularize(mesh)
        (res.normal_consistency + res.laplacian).backward()
        # gradients reach both extraction inputs
        assert float(sdf.grad.abs().sum()) > 0
        assert float(pos.grad.abs().sum()) > 0
