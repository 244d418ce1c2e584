"""Implicit field fitting, edit-mode freezing, keypoint advection."""

import numpy as np
import pytest
import torch

from distillforge.errors import GeometryError
from distillforge.fields import (AnalyticSDFField, ColorField, ImplicitField,
                                 edit_mode_freeze, init_sdf_fit, map_keypoints)
from distillforge.hashgrid import HashConfig
from distillforge.template import head_template, sphere_template
from distillforge.tetra import TetGrid, marching_tets

SMALL_CFG = HashConfig(level_count=4, base_resolution=8, growth=1.5,
                       table_size=2 ** 12, feature_width=2)


def small_field(seed=0, dtype=torch.float32):
    return ImplicitField(SMALL_CFG, hidden=(32,), dtype=dtype,
                         offset_clamp_radius=0.25 / 16,
                         rng=np.random.default_rng(seed))


class TestInitSdfFit:
    def test_sphere_fit_reaches_tolerance(self):
        field = ImplicitField(HashConfig(), hidden=(64,), dtype=torch.float32,
                              rng=np.random.default_rng(1))
        rep = init_sdf_fit(field, sphere_template(0.3), points_per_iter=10000,
                           iters=1200, rng=np.random.default_rng(2),
                           stop_at_error=9e-3)
        assert rep.holdout_max_error <= 1e-2
        assert field.ready

    def test_zero_iterations_flags_unfit(self):
        field = small_field(2)
        rep = init_sdf_fit(field, sphere_template(0.3), iters=0,
                           rng=np.random.default_rng(0))
        assert not rep.fitted
        assert not field.ready
        with pytest.raises(GeometryError):
            marching_tets(TetGrid.build(8), field)

    def test_fit_then_extract_sphere_topology(self):
        field = small_field(3)
        init_sdf_fit(field, sphere_template(0.3), points_per_iter=4000,
                     iters=800, rng=np.random.default_rng(4),
                     stop_at_error=9e-3)
        mesh = marching_tets(TetGrid.build(16), field)
        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2
        r = np.linalg.norm(mesh.vertices_np, axis=1)
        assert np.abs(r - 0.3).max() < 0.05


class TestEditFreeze:
    def _fit(self, seed):
        field = small_field(seed)
        init_sdf_fit(field, sphere_template(0.3), points_per_iter=4000,
                     iters=300, rng=np.random.default_rng(seed))
        return field

    def test_freeze_requires_fit(self):
        with pytest.raises(GeometryError):
            edit_mode_freeze(small_field(5))

    def test_sdf_constant_after_offset_training(self):
        field = self._fit(6)
        handle = edit_mode_freeze(field)
        probe = torch.tensor(
            np.random.default_rng(7).uniform(-0.5, 0.5, (1000, 3)),
            dtype=field.torch_dtype)
        with torch.no_grad():
            before = field.sdf(probe).numpy().copy()
        opt = torch.optim.Adam(handle.trainable_parameters(), lr=1e-2)
        target = torch.tensor(
            np.random.default_rng(8).uniform(-0.005, 0.005, (1000, 3)),
            dtype=field.torch_dtype)
        for _ in range(20):
            loss = ((field.offsets(probe) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            after = field.sdf(probe).numpy()
        assert np.array_equal(before, after)

    def test_offsets_remain_trainable(self):
        field = self._fit(9)
        handle = edit_mode_freeze(field)
        probe = torch.tensor(
            np.random.default_rng(10).uniform(-0.4, 0.4, (500, 3)),
            dtype=field.torch_dtype)
        target = torch.tensor(
            np.random.default_rng(11).uniform(-0.004, 0.004, (500, 3)),
            dtype=field.torch_dtype)
        opt = torch.optim.Adam(handle.trainable_parameters(), lr=1e-2)

        def current_loss():
            return float(((field.offsets(probe) - target) ** 2).mean())

        start = current_loss()
        for _ in range(50):
            loss = ((field.offsets(probe) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert current_loss() < start

    def test_topology_preserved_under_offset_edits(self):
        field = self._fit(12)
        grid = TetGrid.build(16)
        before = marching_tets(grid, field).euler_characteristic()
        edit_mode_freeze(field)
        rng = np.random.default_rng(20)
        with torch.no_grad():
            for w in field.mlp_off.weights:
                w += torch.tensor(rng.standard_normal(tuple(w.shape)) * 0.5,
                                  dtype=w.dtype)
        after = marching_tets(grid, field).euler_characteristic()
        assert before == after


class FakeOffsetField:
    """Field double with a constant offset everywhere."""

    def __init__(self, delta):
        self.delta = np.asarray(delta, dtype=np.float64)

    def offsets_np(self, points):
        return np.broadcast_to(self.delta, points.shape).copy()


class TestMapKeypoints:
    def test_zero_offsets_identity(self):
        tpl = head_template()
        ks = map_keypoints(tpl, AnalyticSDFField(tpl.sdf))
        for name, p in tpl.keypoints.items():
            assert np.allclose(ks.named[name], p, atol=0)
        assert np.allclose(ks.contour, tpl.contour, atol=0)

    def test_uniform_translation_shifts_all(self):
        tpl = head_template()
        delta = np.array([0.003, -0.001, 0.002])
        ks = map_keypoints(tpl, FakeOffsetField(delta))
        for name, p in tpl.keypoints.items():
            assert np.allclose(ks.named[name], p + delta, atol=1e-15)
        assert np.allclose(ks.contour, tpl.contour + delta, atol=1e-15)


class TestColorField:
    def test_rgb_bounded(self):
        cf = ColorField(SMALL_CFG, hidden=(32,), dtype=torch.float64,
                        rng=np.random.default_rng(13))
        with torch.no_grad():
            for w in cf.mlp.weights:
                w *= 50.0
        pts = torch.tensor(np.random.default_rng(14).uniform(-0.5, 0.5, (200, 3)))
        rgb = cf.rgb(pts).detach().numpy()
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_trainable_to_match_target(self):
        cf = ColorField(SMALL_CFG, hidden=(32,), dtype=torch.float32,
                        rng=np.random.default_rng(15))
        rng = np.random.default_rng(16)
        opt = torch.optim.Adam(cf.parameters(), lr=5e-3)
        for _ in range(200):
            pts = rng.uniform(-0.4, 0.4, (512, 3))
            target = torch.tensor(np.clip(0.5 + 0.8 * pts, 0.05, 0.95),
                                  dtype=torch.float32)
            loss = ((cf.rgb(torch.tensor(pts, dtype=torch.float32)) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        pts = rng.uniform(-0.4, 0.4, (500, 3))
        with torch.no_grad():
            got = cf.rgb(torch.tensor(pts, dtype=torch.float32)).numpy()
        err = np.abs(got - np.clip(0.5 + 0.8 * pts, 0.05, 0.95)).mean()
        assert err < 0.05
