"""Meshes, the sphere template, cameras, projection and vertex visibility.

The deformable template is a subdivided icosahedron with a fixed spherical UV
parameterization. Cameras are azimuth/elevation/distance orbits looking at the
origin; azimuth is carried as Cartesian (a_x, a_y) end to end and only
realized as an angle when the viewing frame is built, so interpolating camera
attributes never crosses the 0/360 wrap.

Everything here exists twice in spirit: plain-numpy paths used by oracles,
visibility and data generation, and tape paths (``camera_frame`` /
``project``) used by the differentiable renderer. The two are cross-checked
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, stack

DEFAULT_FOV_DEG = 30.0
NEAR_FRACTION = 0.01   # near plane at 0.01 * camera distance


@dataclass
class Mesh:
    """Fixed-topology triangle mesh with per-vertex UVs in [0,1]^2."""

    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3) int, CCW winding = outward normal
    uv: np.ndarray         # (V, 2)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def edge_count(self):
        e = set()
        for a, b, c in self.faces:
            e.update({tuple(sorted(p)) for p in ((a, b), (b, c), (c, a))})
        return len(e)

    def validate(self):
        v = self.num_vertices
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ValueError("face index out of range")
        if any(len(set(f)) != 3 for f in self.faces):
            raise ValueError("degenerate face (repeated vertex index)")


@dataclass
class CameraRaw:
    """Realized orbit camera: Cartesian azimuth, elevation (deg), distance."""

    a_x: float
    a_y: float
    e: float
    d: float

    @property
    def azimuth_deg(self):
        return math.degrees(math.atan2(self.a_x, self.a_y)) % 360.0


@dataclass
class CameraMatrices:
    view: np.ndarray       # (4, 4) world -> camera rigid transform
    proj: np.ndarray       # (4, 4) perspective projection
    height: int
    width: int
    fov_deg: float
    eye: np.ndarray        # (3,) convenience copy of the camera position


# -- icosphere template -------------------------------------------------------

def icosphere(subdivisions):
    """Unit icosphere with deterministic ordering and spherical UVs.

    subdivisions 0..3 give V = 12 / 42 / 162 / 642. Midpoint vertices are
    shared through an edge cache so V' = V + E, F' = 4F at each level.
    """
    if subdivisions not in (0, 1, 2, 3):
        raise ValueError(f"subdivisions must be in 0..3, got {subdivisions}")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [_normalized(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                cache[key] = len(verts)
                verts.append(_normalized(tuple(
                    0.5 * (verts[i][k] + verts[j][k]) for k in range(3))))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    vertices = np.array(verts, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    mesh = Mesh(vertices, faces, _spherical_uv(vertices, faces))
    mesh.validate()
    return mesh


def _normalized(v):
    n = math.sqrt(sum(x * x for x in v))
    return tuple(x / n for x in v)


def _spherical_uv(vertices, faces):
    """Longitude/latitude UVs with a dominant-side vote at the u=0/1 seam."""
    x, y, z = vertices[:, 0], vertices[:, 1], vertices[:, 2]
    u = 0.5 + np.arctan2(x, z) / (2 * math.pi)   # seam along -z
    v = 0.5 + np.arcsin(np.clip(y, -1, 1)) / math.pi
    u = np.mod(u, 1.0)
    # faces whose u span exceeds half the texture cross the seam
    fu = u[faces]
    seam_faces = (fu.max(axis=1) - fu.min(axis=1)) > 0.5
    votes = np.zeros(len(vertices), dtype=np.int64)
    incident = np.zeros(len(vertices), dtype=np.int64)
    for f in faces:
        for vi in f:
            incident[vi] += 1
    for f in faces[seam_faces]:
        for vi in f:
            if u[vi] < 0.5:
                votes[vi] += 1
    # a low-side vertex whose incident faces mostly wrap moves to the u=1 end
    wrap = votes * 2 > incident
    u = np.where(wrap, np.minimum(u + 1.0, 1.0), u)
    return np.stack([u, v], axis=1)


# -- cameras ------------------------------------------------------------------

def _frame_from_angles(sin_a, cos_a, sin_e, cos_e):
    """Orthonormal (right, up, fwd) basis of an orbit camera, componentwise.

    Analytic in the four sines/cosines, so it stays well defined at the
    elevation poles: at |e| = 90 the formulas continue the frame that a
    look-at construction with fallback up-vector +Z (rotated by the azimuth)
    would produce, and the basis remains orthonormal.
    """
    right = (cos_a, 0.0 * cos_a, -sin_a)
    up = (-sin_e * sin_a, cos_e, -sin_e * cos_a)
    fwd = (-cos_e * sin_a, -sin_e, -cos_e * cos_a)   # from eye toward origin
    return right, up, fwd


def camera_matrices(cam: CameraRaw, image_hw, fov_deg=DEFAULT_FOV_DEG):
    """View and projection matrices for an orbit camera (plain numpy)."""
    if cam.d <= 0:
        raise ValueError(f"camera distance must be positive, got {cam.d}")
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov must be in (0, 180), got {fov_deg}")
    h, w = image_hw
    a = math.atan2(cam.a_x, cam.a_y)
    e = math.radians(cam.e)
    sin_a, cos_a, sin_e, cos_e = math.sin(a), math.cos(a), math.sin(e), math.cos(e)
    eye = cam.d * np.array([cos_e * sin_a, sin_e, cos_e * cos_a])
    right, up, fwd = _frame_from_angles(sin_a, cos_a, sin_e, cos_e)
    # camera space looks down -z: rotation rows are (right, up, -fwd)
    r = np.array([right, up, tuple(-f for f in fwd)], dtype=np.float64)
    view = np.eye(4)
    view[:3, :3] = r
    view[:3, 3] = -r @ eye
    near = NEAR_FRACTION * cam.d
    far = 10.0 * cam.d
    t = 1.0 / math.tan(math.radians(fov_deg) / 2.0)
    aspect = w / h
    proj = np.zeros((4, 4))
    proj[0, 0] = t / aspect
    proj[1, 1] = t
    proj[2, 2] = -(far + near) / (far - near)
    proj[2, 3] = -2 * far * near / (far - near)
    proj[3, 2] = -1.0
    return CameraMatrices(view, proj, h, w, fov_deg, eye)


def project_np(points, cam: CameraMatrices):
    """Pixel coordinates and positive view depth of world points (numpy)."""
    p = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    vc = (cam.view @ p.T).T                       # camera space, -z in front
    depth = -vc[:, 2]
    near = NEAR_FRACTION * _distance_from_view(cam)
    behind = depth <= near
    if behind.any():
        raise ValueError(f"vertex {int(np.argmax(behind))} behind the near plane")
    clip = (cam.proj @ np.concatenate([vc[:, :3], np.ones((len(points), 1))], axis=1).T).T
    ndc = clip[:, :2] / clip[:, 3:4]
    px = (ndc[:, 0] + 1) * 0.5 * cam.width
    py = (1 - ndc[:, 1]) * 0.5 * cam.height
    return np.stack([px, py], axis=1), depth


def _distance_from_view(cam: CameraMatrices):
    return float(np.linalg.norm(cam.eye))


def realize_camera_values(raw):
    """Map a raw camera 4-vector to a CameraRaw (numpy, no tape).

    Squashing matches the tape path: e = 90 tanh(e_raw), d = d_min +
    softplus(d_raw). (a_x, a_y) pass through unchanged.
    """
    from .attributes import D_MIN
    a_x, a_y, e_raw, d_raw = (float(v) for v in raw)
    e = 90.0 * math.tanh(e_raw)
    d = D_MIN + math.log1p(math.exp(-abs(d_raw))) + max(d_raw, 0.0)
    return CameraRaw(a_x, a_y, e, d)


# -- tape camera + projection -------------------------------------------------

def camera_frame(cam_raw: Tensor, fov_deg=DEFAULT_FOV_DEG):
    """Differentiable viewing frame from raw camera rows (B, 4).

    Raw entries are (a_x, a_y, e_raw, d_raw); elevation and distance are
    squashed here exactly as in `realize_camera_values`. Returns a dict of
    tape tensors: eye (B,3), right/up/fwd (B,3), d (B,), inv_tan (scalar).
    """
    from .attributes import D_MIN
    a_x, a_y = cam_raw[:, 0], cam_raw[:, 1]
    e_raw, d_raw = cam_raw[:, 2], cam_raw[:, 3]
    norm = (a_x * a_x + a_y * a_y + 1e-12).sqrt()
    sin_a, cos_a = a_x / norm, a_y / norm
    e = (90.0 * math.pi / 180.0) * e_raw.tanh()
    sin_e, cos_e = e.sin(), e.cos()
    d = ad.softplus(d_raw) + D_MIN
    right, up, fwd = _frame_from_angles(sin_a, cos_a, sin_e, cos_e)
    eye = stack([d * cos_e * sin_a, d * sin_e, d * cos_e * cos_a], axis=1)
    return {
        "eye": eye,
        "right": stack(list(right), axis=1),
        "up": stack(list(up), axis=1),
        "fwd": stack(list(fwd), axis=1),
        "d": d,
        "inv_tan": 1.0 / math.tan(math.radians(fov_deg) / 2.0),
    }


def project(verts: Tensor, frame, image_hw):
    """Differentiable projection of (B, V, 3) vertices to pixels and depth.

    Returns pixel coordinates (B, V, 2) with x right / y down and pixel
    centers at half-integers, plus positive view depth (B, V). Raises when a
    vertex violates the near-plane margin (0.01 d).
    """
    h, w = image_hw
    rel = verts - frame["eye"].reshape(-1, 1, 3)
    xc = (rel * frame["right"].reshape(-1, 1, 3)).sum(axis=2)
    yc = (rel * frame["up"].reshape(-1, 1, 3)).sum(axis=2)
    # fwd points from the eye toward the origin, so depth is positive in front
    depth = (rel * frame["fwd"].reshape(-1, 1, 3)).sum(axis=2)
    near = NEAR_FRACTION * frame["d"].data
    if (depth.data <= near[:, None]).any():
        b, v = np.unravel_index(int(np.argmin(depth.data - near[:, None])), depth.shape)
        raise ValueError(f"vertex {v} of batch entry {b} behind the near plane")
    ndc_x = xc * frame["inv_tan"] / depth * (h / w)
    ndc_y = yc * frame["inv_tan"] / depth
    px = (ndc_x + 1.0) * (0.5 * w)
    py = (1.0 - ndc_y) * (0.5 * h)
    return stack([px, py], axis=2), depth


# -- normals and visibility ---------------------------------------------------

def face_normals(vertices, faces):
    """Unit outward normals per face; works on tape tensors or ndarrays."""
    if isinstance(vertices, Tensor):
        va = ad.take(vertices, faces[:, 0])
        vb = ad.take(vertices, faces[:, 1])
        vc = ad.take(vertices, faces[:, 2])
        e1, e2 = vb - va, vc - va
        n = _cross3(e1, e2)
        norm = ((n * n).sum(axis=1, keepdims=True) + 1e-20).sqrt()
        _check_area(norm.data[:, 0])
        return n / norm
    va, vb, vc = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(vb - va, vc - va)
    norm = np.linalg.norm(n, axis=1)
    _check_area(norm)
    return n / norm[:, None]


def _check_area(norms):
    if (norms < 1e-12).any():
        raise ValueError(f"zero-area face {int(np.argmin(norms))}")


def _cross3(a, b):
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def batched_face_normals(verts: Tensor, faces):
    """Tape face normals for batched vertices (B, V, 3) -> (B, F, 3)."""
    b, v, _ = verts.shape
    flat = verts.reshape(b * v, 3)
    offs = (np.arange(b)[:, None, None] * v + faces[None]).reshape(-1, 3)
    va = ad.take(flat, offs[:, 0])
    vb = ad.take(flat, offs[:, 1])
    vc = ad.take(flat, offs[:, 2])
    n = _cross3(vb - va, vc - va)
    norm = ((n * n).sum(axis=1, keepdims=True) + 1e-20).sqrt()
    return (n / norm).reshape(b, faces.shape[0], 3)


def rasterize_hard(verts_px, depth, faces, image_hw, front_only_normals=None,
                   eye=None, verts_world=None):
    """Z-buffer rasterization (numpy): hard mask, depth buffer, face ids.

    Pixels are sampled at their centers. Used as the non-differentiable
    oracle for the soft rasterizer and for vertex visibility.
    """
    h, w = image_hw
    zbuf = np.full(h * w, np.inf)
    fid = np.full(h * w, -1, dtype=np.int64)
    keep = np.arange(len(faces))
    if front_only_normals is not None:
        centers = verts_world[faces].mean(axis=1)
        keep = keep[((eye - centers) * front_only_normals).sum(axis=1) > 0]
    tri = verts_px[faces[keep]]                       # (F', 3, 2)
    zt = depth[faces[keep]]                           # (F', 3)
    lo = np.clip(np.floor(tri.min(axis=1) - 0.5).astype(int), 0, [w - 1, h - 1])
    hi = np.clip(np.ceil(tri.max(axis=1) + 0.5).astype(int), 0, [w - 1, h - 1])
    for k in range(len(keep)):
        x0, y0 = lo[k]
        x1, y1 = hi[k]
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        pts = np.stack([px.ravel(), py.ravel()], axis=1)
        bary, inside = barycentric(tri[k], pts)
        if not inside.any():
            continue
        z = bary[inside] @ zt[k]
        iy = (pts[inside, 1] - 0.5).astype(int)
        ix = (pts[inside, 0] - 0.5).astype(int)
        lin = iy * w + ix
        better = z < zbuf[lin]
        zbuf[lin[better]] = z[better]
        fid[lin[better]] = keep[k]
    return (fid >= 0).reshape(h, w), zbuf.reshape(h, w), fid.reshape(h, w)


def barycentric(tri, pts):
    """Affine barycentric coords of pts w.r.t. a 2D triangle, + inside mask."""
    a, b, c = tri
    v0, v1 = b - a, c - a
    v2 = pts - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    if abs(den) < 1e-12:
        z = np.zeros(len(pts))
        return np.stack([z, z, z], axis=1), np.zeros(len(pts), dtype=bool)
    l1 = (v2[:, 0] * v1[1] - v1[0] * v2[:, 1]) / den
    l2 = (v0[0] * v2[:, 1] - v2[:, 0] * v0[1]) / den
    l0 = 1.0 - l1 - l2
    bary = np.stack([l0, l1, l2], axis=1)
    return bary, (bary >= 0).all(axis=1)


def visibility(mesh: Mesh, cam: CameraMatrices):
    """Boolean visibility per vertex under a hard z-buffer render.

    A vertex is visible iff it belongs to a front-facing face and its depth
    is within 1e-3 d of the rasterized depth at its projected pixel. The
    buffer depth is taken conservatively as the maximum over the pixel's 3x3
    neighborhood: the winning face's depth varies across a pixel footprint
    by far more than the tolerance wherever the surface is inclined, so a
    single-sample compare would reject unoccluded vertices.
    """
    verts_px, depth = project_np(mesh.vertices, cam)
    normals = face_normals(mesh.vertices, mesh.faces)
    _, zbuf, _ = rasterize_hard(verts_px, depth, mesh.faces, (cam.height, cam.width),
                                front_only_normals=normals, eye=cam.eye,
                                verts_world=mesh.vertices)
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    front = ((cam.eye - centers) * normals).sum(axis=1) > 0
    has_front = np.zeros(mesh.num_vertices, dtype=bool)
    for f, is_front in zip(mesh.faces, front):
        if is_front:
            has_front[f] = True
    ix = np.clip((verts_px[:, 0] - 0.5).round().astype(int), 0, cam.width - 1)
    iy = np.clip((verts_px[:, 1] - 0.5).round().astype(int), 0, cam.height - 1)
    padded = np.pad(zbuf, 1, constant_values=np.inf)
    neigh = np.stack([padded[1 + dy: 1 + dy + cam.height, 1 + dx: 1 + dx + cam.width]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    zmax = neigh.max(axis=0)
    tol = 1e-3 * _distance_from_view(cam)
    on_surface = zmax[iy, ix] >= depth - tol
    return has_front & on_surface


# -- OBJ serialization --------------------------------------------------------

def save_obj(mesh: Mesh, path):
    """Write v / vt / f records with deterministic formatting and order."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for t in mesh.uv:
        lines.append(f"vt {t[0]:.8f} {t[1]:.8f}")
    for f in mesh.faces:
        lines.append("f " + " ".join(f"{i + 1}/{i + 1}" for i in f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path):
    verts, uv, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uv.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    mesh = Mesh(np.array(verts), np.array(faces, dtype=np.int64),
                np.array(uv) if uv else np.zeros((len(verts), 2)))
    mesh.validate()
    return mesh
