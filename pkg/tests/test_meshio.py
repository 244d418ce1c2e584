"""OBJ / PLY export round-trips."""

import numpy as np

from distillforge.fields import AnalyticSDFField
from distillforge.meshio import read_obj, read_ply, write_obj, write_ply
from distillforge.template import sphere_template
from distillforge.tetra import Mesh, TetGrid, marching_tets


def _sphere_mesh():
    return marching_tets(TetGrid.build(16),
                         AnalyticSDFField(sphere_template(0.3).sdf))


def test_obj_round_trip_positions_and_faces(tmp_path):
    mesh = _sphere_mesh()
    path = tmp_path / "m.obj"
    write_obj(path, mesh.vertices_np, mesh.faces, mesh.normals_np)
    v, f, n, c = read_obj(path)
    assert v.shape == mesh.vertices_np.shape
    assert np.array_equal(f, mesh.faces)
    assert np.allclose(v, mesh.vertices_np, atol=1e-6)
    assert np.allclose(n, mesh.normals_np, atol=1e-6)
    assert c is None


def test_obj_with_vertex_colors(tmp_path):
    mesh = _sphere_mesh()
    colors = np.clip(mesh.vertices_np + 0.5, 0, 1)
    path = tmp_path / "c.obj"
    write_obj(path, mesh.vertices_np, mesh.faces, mesh.normals_np, colors)
    v, f, n, c = read_obj(path)
    assert np.allclose(c, colors, atol=1e-5)


def test_obj_euler_characteristic_preserved(tmp_path):
    mesh = _sphere_mesh()
    path = tmp_path / "e.obj"
    write_obj(path, mesh.vertices_np, mesh.faces)
    v, f, _, _ = read_obj(path)
    re_mesh = Mesh(vertices=mesh.vertices, faces=f, normals=mesh.normals)
    assert re_mesh.euler_characteristic() == 2


def test_ply_round_trip(tmp_path):
    mesh = _sphere_mesh()
    colors = np.clip(mesh.vertices_np * 1.5 + 0.5, 0, 1)
    path = tmp_path / "m.ply"
    write_ply(path, mesh.vertices_np, mesh.faces, mesh.normals_np, colors)
    v, f, n, c = read_ply(path)
    assert np.array_equal(f, mesh.faces)
    assert np.allclose(v, mesh.vertices_np, atol=1e-6)
    assert np.allclose(n, mesh.normals_np, atol=1e-6)
    assert np.allclose(c, colors, atol=1.0 / 255)


def test_ply_without_optionals(tmp_path):
    mesh = _sphere_mesh()
    path = tmp_path / "bare.ply"
    write_ply(path, mesh.vertices_np, mesh.faces)
    v, f, n, c = read_ply(path)
    assert n is None and c is None
    assert np.allclose(v, mesh.vertices_np, atol=1e-6)
