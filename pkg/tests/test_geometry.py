import math

import numpy as np
import pytest

from softrecon import autodiff as ad
from softrecon import geometry
from softrecon.autodiff import constant, parameter, precision, grad_check
from softrecon.attributes import camera_raw_from_values
from softrecon.geometry import (CameraRaw, camera_matrices, camera_frame,
                                face_normals, icosphere, project, project_np,
                                visibility, load_obj, save_obj)


# -- icosphere -----------------------------------------------------------------

@pytest.mark.parametrize("level,v,f", [(0, 12, 20), (1, 42, 80), (2, 162, 320)])
def test_icosphere_counts_and_euler(level, v, f):
    mesh = icosphere(level)
    assert mesh.num_vertices == v
    assert mesh.num_faces == f
    assert mesh.num_vertices - mesh.edge_count() + mesh.num_faces == 2


def test_icosphere_unit_radius_and_uv_range():
    mesh = icosphere(2)
    assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0)
    assert mesh.uv.min() >= 0.0 and mesh.uv.max() <= 1.0


def test_icosphere_rejects_bad_level():
    with pytest.raises(ValueError):
        icosphere(4)


def test_icosphere_deterministic():
    a, b = icosphere(1), icosphere(1)
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.faces.tobytes() == b.faces.tobytes()
    assert a.uv.tobytes() == b.uv.tobytes()


# -- cameras -------------------------------------------------------------------

def test_camera_eye_convention_azimuth_zero():
    cam = camera_matrices(CameraRaw(0.0, 1.0, 0.0, 2.0), (64, 64))
    assert np.allclose(cam.eye, [0.0, 0.0, 2.0], atol=1e-12)


def test_camera_eye_convention_azimuth_ninety():
    cam = camera_matrices(CameraRaw(1.0, 0.0, 0.0, 2.0), (64, 64))
    assert np.allclose(cam.eye, [2.0, 0.0, 0.0], atol=1e-12)


def test_camera_pole_fallback_orthonormal():
    for a_x, a_y in [(0.0, 1.0), (1.0, 0.0), (0.7, -0.7)]:
        cam = camera_matrices(CameraRaw(a_x, a_y, 90.0, 3.0), (32, 32))
        assert np.allclose(cam.eye, [0.0, 3.0, 0.0], atol=1e-12)
        r = cam.view[:3, :3]
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_camera_view_is_rigid():
    cam = camera_matrices(CameraRaw(0.3, 0.8, 25.0, 2.5), (64, 64))
    r = cam.view[:3, :3]
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    # eye reconstructed from the view transform
    eye = -r.T @ cam.view[:3, 3]
    e, a = math.radians(25.0), math.atan2(0.3, 0.8)
    expect = 2.5 * np.array([math.cos(e) * math.sin(a), math.sin(e),
                             math.cos(e) * math.cos(a)])
    assert np.allclose(eye, expect, atol=1e-12)


def test_azimuth_scale_invariance():
    a = camera_matrices(CameraRaw(0.3, 0.4, 10.0, 2.0), (64, 64))
    b = camera_matrices(CameraRaw(0.6, 0.8, 10.0, 2.0), (64, 64))
    assert np.allclose(a.view, b.view, atol=1e-12)


def test_camera_rejects_bad_inputs():
    with pytest.raises(ValueError):
        camera_matrices(CameraRaw(0, 1, 0, -1.0), (64, 64))
    with pytest.raises(ValueError):
        camera_matrices(CameraRaw(0, 1, 0, 2.0), (64, 64), fov_deg=200.0)


# -- projection ----------------------------------------------------------------

def test_project_center():
    cam = camera_matrices(CameraRaw(0, 1, 0, 2.0), (64, 48))
    px, depth = project_np(np.zeros((1, 3)), cam)
    assert np.allclose(px[0], [24.0, 32.0])
    assert depth[0] == pytest.approx(2.0)


def test_project_monotone_along_right_axis():
    cam = camera_matrices(CameraRaw(0, 1, 0, 3.0), (64, 64))
    right = cam.view[0, :3]
    offsets = np.linspace(-0.5, 0.5, 9)
    pts = offsets[:, None] * right[None, :]
    px, _ = project_np(pts, cam)
    assert (np.diff(px[:, 0]) > 0).all()


def test_project_behind_near_plane_raises():
    cam = camera_matrices(CameraRaw(0, 1, 0, 2.0), (64, 64))
    with pytest.raises(ValueError, match="vertex 1"):
        project_np(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]]), cam)


def test_tape_projection_matches_numpy():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(10, 3))
    raw = camera_raw_from_values(37.0, 12.0, 2.4)
    cam = camera_matrices(geometry.realize_camera_values(raw), (48, 64))
    px_np, d_np = project_np(pts, cam)
    with precision("float64"):
        frame = camera_frame(constant(raw.reshape(1, 4)))
        px_t, d_t = project(constant(pts.reshape(1, 10, 3)), frame, (48, 64))
    assert np.allclose(px_t.data[0], px_np, atol=1e-9)
    assert np.allclose(d_t.data[0], d_np, atol=1e-9)


def test_projection_gradient_wrt_distance():
    with precision("float64"):
        pts = constant(np.array([[[0.3, 0.2, -0.1], [-0.2, 0.1, 0.4]]]))
        raw = parameter(camera_raw_from_values(30.0, 15.0, 2.2).reshape(1, 4))

        def f():
            frame = camera_frame(raw)
            px, depth = project(pts, frame, (32, 32))
            return (px * px).sum() + depth.sum()

        report = grad_check(f, {"raw": raw})
        assert report.max_rel_error < 1e-3


def test_project_azimuth_equivariance():
    # rotating the camera azimuth by delta == rotating the mesh by -delta
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.5, 0.5, size=(20, 3))
    delta = math.radians(40.0)
    rot = np.array([[math.cos(-delta), 0, math.sin(-delta)],
                    [0, 1, 0],
                    [-math.sin(-delta), 0, math.cos(-delta)]])
    base = camera_matrices(CameraRaw(math.sin(0.5), math.cos(0.5), 10.0, 2.5), (64, 64))
    shifted = camera_matrices(
        CameraRaw(math.sin(0.5 + delta), math.cos(0.5 + delta), 10.0, 2.5), (64, 64))
    px_shift, _ = project_np(pts, shifted)
    px_rot, _ = project_np(pts @ rot.T, base)
    assert np.allclose(px_shift, px_rot, atol=1e-4)


# -- normals ---------------------------------------------------------------------

def test_face_normals_plane():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    n = face_normals(verts, np.array([[0, 1, 2]]))
    assert np.allclose(n[0], [0, 0, 1])


def test_face_normals_scale_invariant():
    mesh = icosphere(1)
    n1 = face_normals(mesh.vertices, mesh.faces)
    n2 = face_normals(2.0 * mesh.vertices, mesh.faces)
    assert np.allclose(n1, n2, atol=1e-12)


def test_face_normals_point_outward():
    mesh = icosphere(1)
    n = face_normals(mesh.vertices, mesh.faces)
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    assert ((n * centers).sum(axis=1) > 0).all()


def test_face_normals_zero_area_raises():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(ValueError, match="face 0"):
        face_normals(verts, np.array([[0, 1, 2]]))


def test_batched_face_normals_match():
    mesh = icosphere(0)
    t = constant(np.stack([mesh.vertices, 1.5 * mesh.vertices]))
    n = geometry.batched_face_normals(t, mesh.faces)
    ref = face_normals(mesh.vertices, mesh.faces)
    assert np.allclose(n.data[0], ref, atol=1e-6)
    assert np.allclose(n.data[1], ref, atol=1e-6)


# -- visibility -------------------------------------------------------------------

def test_visibility_single_triangle():
    verts = np.array([[-0.3, -0.3, 0.0], [0.3, -0.3, 0.0], [0.0, 0.4, 0.0]])
    mesh = geometry.Mesh(verts, np.array([[0, 1, 2]]), np.zeros((3, 2)))
    cam = camera_matrices(CameraRaw(0, 1, 0, 2.0), (64, 64))
    assert visibility(mesh, cam).all()


def test_visibility_sphere_hemispheres():
    mesh = icosphere(2)
    cam = camera_matrices(CameraRaw(0, 1, 0, 8.0), (128, 128))
    vis = visibility(mesh, cam)
    z = mesh.vertices[:, 2]
    assert vis[z > 0].all()
    assert not vis[z < -0.1].any()


def test_visibility_sweep_covers_all_vertices():
    mesh = icosphere(1)
    seen = np.zeros(mesh.num_vertices, dtype=bool)
    for az in range(0, 360, 30):
        a = math.radians(az)
        cam = camera_matrices(CameraRaw(math.sin(a), math.cos(a), 0.0, 3.0), (64, 64))
        seen |= visibility(mesh, cam)
    assert seen.all()


def test_visibility_matches_convex_normal_test():
    # convex mesh: visible iff some incident face has normal . (eye - v) > 0
    mesh = icosphere(1)
    cam = camera_matrices(CameraRaw(math.sin(0.7), math.cos(0.7), 18.0, 3.0), (128, 128))
    vis = visibility(mesh, cam)
    normals = face_normals(mesh.vertices, mesh.faces)
    expect = np.zeros(mesh.num_vertices, dtype=bool)
    margins = np.full(mesh.num_vertices, -np.inf)
    for f, n in zip(mesh.faces, normals):
        for vi in f:
            dot = n @ (cam.eye - mesh.vertices[vi])
            margins[vi] = max(margins[vi], dot)
            if dot > 0:
                expect[vi] = True
    clear = np.abs(margins) > 1e-3 * 3.0
    assert (vis[clear] == expect[clear]).all()


# -- OBJ ---------------------------------------------------------------------------

def test_obj_roundtrip(tmp_path):
    mesh = icosphere(1)
    p = tmp_path / "sphere.obj"
    save_obj(mesh, p)
    back = load_obj(p)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-7)
    assert (back.faces == mesh.faces).all()
    assert np.allclose(back.uv, mesh.uv, atol=1e-7)
    save_obj(back, tmp_path / "again.obj")
    assert (tmp_path / "again.obj").read_bytes() == p.read_bytes()
