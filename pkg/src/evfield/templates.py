"""Procedural body templates: bars, planar chains and a box humanoid."""
from __future__ import annotations

import numpy as np

from .kinematics import BodyModel


def _grid(x0, x1, y0, y1, nx, ny, z=0.0):
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    verts = np.array([[x, y, z] for y in ys for x in xs])
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            faces += [[a, b, d], [a, d, c]]
    return verts, np.array(faces)


def make_bar(length: float = 0.4, width: float = 0.1, nx: int = 16, ny: int = 4,
             name: str = "bar") -> BodyModel:
    """Single-joint flat rectangular mesh in the z=0 plane, centered on the root."""
    verts, faces = _grid(-length / 2, length / 2, -width / 2, width / 2, nx, ny)
    return BodyModel(parent=[-1], offset=[[0.0, 0.0, 0.0]], vertices=verts,
                     skin=np.ones((len(verts), 1)), faces=faces, scale=None, name=name)


def make_chain(n_joints: int = 6, bone: float = 0.2, width: float = 0.04, segments: int = 8,
               name: str | None = None) -> BodyModel:
    """Planar chain along +x with a flat ribbon mesh per bone.

    Ribbon vertices are bound rigidly to the bone's parent joint, except the
    column at an interior joint which is split half/half with the previous
    bone's joint.
    """
    J = n_joints
    parent = [-1] + list(range(J - 1))
    offset = [[0.0, 0.0, 0.0]] + [[bone, 0.0, 0.0]] * (J - 1)
    verts, faces, skin = [], [], []
    for b in range(J - 1):
        v, f = _grid(b * bone, (b + 1) * bone, -width / 2, width / 2, segments, 1)
        base = len(verts)
        for k, p in enumerate(v):
            w = np.zeros(J)
            col = k % (segments + 1)
            if col == 0 and b > 0:
                w[b - 1] = w[b] = 0.5
            else:
                w[b] = 1.0
            skin.append(w)
        verts.extend(v.tolist())
        faces.extend((f + base).tolist())
    return BodyModel(parent=parent, offset=offset, vertices=verts, skin=np.array(skin),
                     faces=faces, scale=None, name=name or f"chain{J}")


def _box(p0, p1, half):
    """Axis-free box around the segment p0->p1 (closed, 8 vertices, 12 triangles)."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    d = d / (np.linalg.norm(d) or 1.0)
    a = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, a)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    corners = []
    for p in (p0, p1):
        for su, sw in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            corners.append(p + half * (su * u + sw * w))
    quads = [(0, 1, 2, 3), (4, 7, 6, 5), (0, 4, 5, 1), (1, 5, 6, 2), (2, 6, 7, 3), (3, 7, 4, 0)]
    faces = []
    for a_, b_, c_, d_ in quads:
        faces += [[a_, b_, c_], [a_, c_, d_]]
    return np.array(corners), np.array(faces)


HUMANOID_JOINTS = (
    "pelvis", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
)


def make_humanoid() -> BodyModel:
    """16-joint humanoid (image y points down, so 'up' is -y) with box limbs."""
    parent = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14]
    offset = [
        [0.0, 0.0, 0.0], [0.0, -0.30, 0.0], [0.0, -0.15, 0.0], [0.0, -0.12, 0.0],
        [0.18, -0.10, 0.0], [0.28, 0.0, 0.0], [0.25, 0.0, 0.0],
        [-0.18, -0.10, 0.0], [-0.28, 0.0, 0.0], [-0.25, 0.0, 0.0],
        [0.10, 0.05, 0.0], [0.0, 0.42, 0.0], [0.0, 0.40, 0.0],
        [-0.10, 0.05, 0.0], [0.0, 0.42, 0.0], [0.0, 0.40, 0.0],
    ]
    model = BodyModel(parent=parent, offset=offset, vertices=np.zeros((0, 3)),
                      skin=np.zeros((0, 16)), faces=np.zeros((0, 3)), scale=None)
    P = model.rest_joints
    verts, faces, skin = [], [], []
    for j in range(1, 16):
        p = parent[j]
        v, f = _box(P[p], P[j], 0.04)
        faces.extend((f + len(verts)).tolist())
        verts.extend(v.tolist())
        for _ in v:
            w = np.zeros(16)
            w[p] = 1.0
            skin.append(w)
    v, f = _box(P[3], P[3] + [0.0, -0.2, 0.0], 0.08)
    faces.extend((f + len(verts)).tolist())
    verts.extend(v.tolist())
    for _ in v:
        w = np.zeros(16)
        w[3] = 1.0
        skin.append(w)
    return BodyModel(parent=parent, offset=offset, vertices=verts, skin=np.array(skin),
                     faces=faces, scale=None, name="humanoid16", head_joint=3, neck_joint=2)
