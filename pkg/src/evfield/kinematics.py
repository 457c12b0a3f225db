"""Kinematic trees, skinning, perspective projection and z-buffer visibility.

The world frame is the camera frame: the camera sits at the origin looking
down +z, image x grows with world x and image y with world y.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import rotations as rot

DEPTH_EPS = 1e-3


class ModelError(ValueError):
    """Invalid body model definition."""


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Kinematic tree with a linear-blend-skinned vertex template.

    ``offset[j]`` is the bone vector from ``parent[j]`` to ``j`` in the rest
    pose (for the root it is the root's rest position).  ``scale`` stretches
    each bone offset and stands in for known body shape.
    """

    parent: np.ndarray
    offset: np.ndarray
    vertices: np.ndarray
    skin: np.ndarray  # dense (V, J) weight matrix
    faces: np.ndarray
    scale: np.ndarray
    name: str = "model"
    head_joint: int | None = None
    neck_joint: int | None = None
    order: np.ndarray = field(init=False, repr=False)
    rest_joints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        J = len(parent)
        offset = np.asarray(self.offset, dtype=np.float64).reshape(J, 3)
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        skin = np.asarray(self.skin, dtype=np.float64).reshape(len(vertices), J)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        scale = np.ones(J) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if scale.shape != (J,):
            raise ModelError("scale needs one entry per joint")
        for name, a in [("offset", offset), ("parent", parent), ("vertices", vertices),
                        ("skin", skin), ("faces", faces), ("scale", scale)]:
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "order", self._validate())
        object.__setattr__(self, "rest_joints", self._rest_joints())

    def _validate(self):
        J = self.n_joints
        if J == 0:
            raise ModelError("model has no joints")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0) or np.any(self.parent >= J):
            raise ModelError("joint 0 must be the only root and parents must be in range")
        order, seen = [], np.zeros(J, bool)
        children = [[] for _ in range(J)]
        for j in range(1, J):
            children[self.parent[j]].append(j)
        stack = [0]
        while stack:
            j = stack.pop()
            if seen[j]:
                raise ModelError("parent array contains a cycle")
            seen[j] = True
            order.append(j)
            stack.extend(reversed(children[j]))
        if not seen.all():
            raise ModelError("parent array contains a cycle or a detached joint")
        if np.any(self.skin < 0) or not np.allclose(self.skin.sum(axis=1), 1.0, atol=1e-9):
            raise ModelError("skinning weights must be >= 0 and sum to 1 per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ModelError("face index out of range")
        if not (np.all(np.isfinite(self.offset)) and np.all(np.isfinite(self.vertices))):
            raise ModelError("non-finite geometry")
        for name in ("head_joint", "neck_joint"):
            j = getattr(self, name)
            if j is not None and not 0 <= j < J:
                raise ModelError(f"{name} out of range")
        return np.array(order, dtype=np.int64)

    def _rest_joints(self):
        P = np.zeros((self.n_joints, 3))
        for j in self.order:
            p = self.parent[j]
            P[j] = self.offset[j] if p < 0 else P[p] + self.scale[j] * self.offset[j]
        P.setflags(write=False)
        return P

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offset[1:] * self.scale[1:, None], axis=1)

    def chain_length(self) -> float:
        return float(self.bone_lengths().sum())

    def head_length(self) -> float | None:
        if self.head_joint is None or self.neck_joint is None:
            return None
        return float(np.linalg.norm(self.rest_joints[self.head_joint] - self.rest_joints[self.neck_joint]))

    def edges(self, boundary_only: bool | None = None) -> np.ndarray:
        """Unique undirected face edges, ``(E, 2)``.

        With ``boundary_only=None`` boundary edges (used by one face) are
        returned when the mesh has any, else all edges.
        """
        if not self.faces.size:
            return np.zeros((0, 2), np.int64)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if boundary_only is None:
            boundary_only = bool(np.any(counts == 1))
        return uniq[counts == 1] if boundary_only else uniq

    def to_dict(self) -> dict:
        skin = [[[int(j), float(w)] for j, w in enumerate(row) if w > 0] for row in self.skin]
        d = {
            "name": self.name,
            "parents": self.parent.tolist(),
            "offsets": self.offset.tolist(),
            "scale": self.scale.tolist(),
            "vertices": self.vertices.tolist(),
            "weights": skin,
            "faces": self.faces.tolist(),
        }
        if self.head_joint is not None:
            d["head_joint"] = self.head_joint
        if self.neck_joint is not None:
            d["neck_joint"] = self.neck_joint
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BodyModel":
        try:
            parents = d["parents"]
            J = len(parents)
            verts = d.get("vertices", [])
            skin = np.zeros((len(verts), J))
            for v, pairs in enumerate(d.get("weights", [])):
                for j, w in pairs:
                    skin[v, int(j)] += float(w)
            if len(d.get("weights", [])) != len(verts):
                raise ModelError("need one weight list per vertex")
            return cls(
                parent=parents, offset=d["offsets"], vertices=verts, skin=skin,
                faces=d.get("faces", []), scale=d.get("scale"), name=d.get("name", "model"),
                head_joint=d.get("head_joint"), neck_joint=d.get("neck_joint"),
            )
        except KeyError as exc:
            raise ModelError(f"missing model field {exc}") from None


def load_model(path_or_name) -> BodyModel:
    """Load a model JSON file, or a bundled template by name (``bar``, ``chain6``, ``humanoid16``)."""
    name = str(path_or_name)
    if name in BUILTIN_MODELS:
        text = resources.files("evfield").joinpath(f"data/{name}.json").read_text()
    else:
        with open(name) as fh:
            text = fh.read()
    return BodyModel.from_dict(json.loads(text))


def save_model(model: BodyModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


BUILTIN_MODELS = ("bar", "chain6", "humanoid16")


@dataclass(frozen=True, eq=False)
class Pose:
    """Joint rotations and root transform; arrays may carry a leading time axis.

    ``local`` is ``(..., J, 4)``; ``root_rot`` ``(..., 4)``; ``root_t``
    ``(..., 3)``.  The root joint's world rotation is ``root_rot * local[0]``.
    """

    local: np.ndarray
    root_rot: np.ndarray
    root_t: np.ndarray

    def __post_init__(self):
        local = np.asarray(self.local, dtype=np.float64)
        root_rot = np.asarray(self.root_rot, dtype=np.float64)
        root_t = np.asarray(self.root_t, dtype=np.float64)
        if local.shape[-1] != 4 or root_rot.shape[-1] != 4 or root_t.shape[-1] != 3:
            raise ValueError("bad pose shapes")
        if local.shape[:-2] != root_rot.shape[:-1] or root_rot.shape[:-1] != root_t.shape[:-1]:
            raise ValueError("pose batch shapes differ")
        object.__setattr__(self, "local", local)
        object.__setattr__(self, "root_rot", root_rot)
        object.__setattr__(self, "root_t", root_t)

    @classmethod
    def identity(cls, n_joints: int, root_t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.tile(rot.IDENTITY, (n_joints, 1)), rot.IDENTITY.copy(), np.asarray(root_t, float))

    @property
    def n_joints(self) -> int:
        return self.local.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.root_t.shape[:-1]

    def __getitem__(self, i) -> "Pose":
        return Pose(self.local[i], self.root_rot[i], self.root_t[i])

    def canonical(self) -> "Pose":
        return Pose(rot.canonicalize(self.local), rot.canonicalize(self.root_rot), self.root_t)

    def to_dict(self) -> dict:
        return {"local": self.local.tolist(), "root_rot": self.root_rot.tolist(),
                "root_t": self.root_t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(rot.unit_quaternion(d["local"]), rot.unit_quaternion(d["root_rot"]), d["root_t"])

    @staticmethod
    def stack(poses: list["Pose"]) -> "Pose":
        return Pose(np.stack([p.local for p in poses]), np.stack([p.root_rot for p in poses]),
                    np.stack([p.root_t for p in poses]))


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")

    @classmethod
    def default(cls, width: int = 240, height: int = 180, f: float = 200.0) -> "Camera":
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(eq=False)
class FKResult:
    positions: np.ndarray  # (..., J, 3)
    rotations: np.ndarray  # (..., J, 3, 3) world
    local_mats: np.ndarray = field(repr=False)
    root_mat: np.ndarray = field(repr=False)


def forward_kinematics(model: BodyModel, pose: Pose) -> FKResult:
    """World joint positions and rotations for a (batched) pose."""
    if pose.n_joints != model.n_joints:
        raise ValueError(f"pose has {pose.n_joints} joints, model {model.n_joints}")
    Rl = rot.to_matrix(pose.local)
    Rr = rot.to_matrix(pose.root_rot)
    shape = pose.batch_shape
    Rw = np.empty(shape + (model.n_joints, 3, 3))
    P = np.empty(shape + (model.n_joints, 3))
    bone = model.offset * model.scale[:, None]
    for j in model.order:
        p = model.parent[j]
        if p < 0:
            Rw[..., j, :, :] = Rr @ Rl[..., j, :, :]
            P[..., j, :] = pose.root_t + model.offset[j]
        else:
            Rw[..., j, :, :] = Rw[..., p, :, :] @ Rl[..., j, :, :]
            P[..., j, :] = P[..., p, :] + np.einsum("...ij,j->...i", Rw[..., p, :, :], bone[j])
    return FKResult(P, Rw, Rl, Rr)


def forward_kinematics_backward(model: BodyModel, pose: Pose, fk: FKResult, g_pos, g_rot=None):
    """Reverse pass of :func:`forward_kinematics`.

    Returns gradients w.r.t. ``(local, root_rot, root_t)``.  Quaternion
    gradients treat the matrix map as a polynomial in the (unit) quaternion.
    """
    gP = np.array(g_pos, dtype=np.float64, copy=True)
    gR = np.zeros_like(fk.rotations) if g_rot is None else np.array(g_rot, dtype=np.float64, copy=True)
    gRl = np.zeros_like(fk.local_mats)
    bone = model.offset * model.scale[:, None]
    g_root_t = np.zeros(pose.root_t.shape)
    g_Rr = np.zeros(fk.root_mat.shape)
    for j in model.order[::-1]:
        p = model.parent[j]
        if p < 0:
            g_root_t += gP[..., j, :]
            g_Rr += gR[..., j, :, :] @ np.swapaxes(fk.local_mats[..., j, :, :], -1, -2)
            gRl[..., j, :, :] = np.swapaxes(fk.root_mat, -1, -2) @ gR[..., j, :, :]
        else:
            gP[..., p, :] += gP[..., j, :]
            gR[..., p, :, :] += gP[..., j, :, None] * bone[j][None, :]
            Rp = fk.rotations[..., p, :, :]
            gRl[..., j, :, :] = np.swapaxes(Rp, -1, -2) @ gR[..., j, :, :]
            gR[..., p, :, :] += gR[..., j, :, :] @ np.swapaxes(fk.local_mats[..., j, :, :], -1, -2)
    g_local = rot.to_matrix_backward(pose.local, gRl)
    g_root_rot = rot.to_matrix_backward(pose.root_rot, g_Rr)
    return g_local, g_root_rot, g_root_t


def skin_vertices(model: BodyModel, pose: Pose, fk: FKResult | None = None) -> np.ndarray:
    """Linear blend skinning: ``sum_j w_j (R_j (v - J_j) + P_j)``."""
    fk = forward_kinematics(model, pose) if fk is None else fk
    rel = model.vertices[:, None, :] - model.rest_joints[None, :, :]  # (V, J, 3)
    # only joints with nonzero weight contribute
    used = np.flatnonzero(model.skin.any(axis=0))
    moved = np.einsum("...jab,vjb->...vja", fk.rotations[..., used, :, :], rel[:, used, :])
    moved = moved + fk.positions[..., None, used, :]
    return np.einsum("vj,...vja->...va", model.skin[:, used], moved)


def project(cam: Camera, X) -> np.ndarray:
    """Pinhole projection of camera-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    X = np.asarray(X, dtype=np.float64)
    Z = X[..., 2]
    if np.any(Z <= 0):
        raise ValueError("point at or behind the camera plane (Z <= 0)")
    return np.stack([cam.fx * X[..., 0] / Z + cam.cx, cam.fy * X[..., 1] / Z + cam.cy], -1)


def project_backward(cam: Camera, X, g):
    X = np.asarray(X, dtype=np.float64)
    Z = X[..., 2]
    gx, gy = g[..., 0], g[..., 1]
    return np.stack([
        cam.fx * gx / Z,
        cam.fy * gy / Z,
        -(cam.fx * gx * X[..., 0] + cam.fy * gy * X[..., 1]) / (Z * Z),
    ], -1)


def depth_buffer(cam: Camera, X: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Rasterize triangles over pixel centers; returns per-pixel nearest depth (inf if empty).

    Depth is interpolated perspective-correctly (linear in 1/Z).  Triangles
    with any vertex at Z <= 0 are skipped.
    """
    H, W = cam.height, cam.width
    zbuf = np.full((H, W), np.inf)
    Z = X[:, 2]
    front = Z > 0
    uv = np.full((len(X), 2), np.nan)
    uv[front] = project(cam, X[front])
    for a, b, c in faces:
        if not (front[a] and front[b] and front[c]):
            continue
        pa, pb, pc = uv[a], uv[b], uv[c]
        area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area) < 1e-12:
            continue
        lo = np.floor(np.minimum(np.minimum(pa, pb), pc) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(pa, pb), pc) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if x0 > x1 or y0 > y1:
            continue
        # pixel (i, j) covers [j, j+1) x [i, i+1); its center is (j+0.5, i+0.5)
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        w_a = ((pb[0] - gx) * (pc[1] - gy) - (pb[1] - gy) * (pc[0] - gx)) / area
        w_b = ((pc[0] - gx) * (pa[1] - gy) - (pc[1] - gy) * (pa[0] - gx)) / area
        w_c = 1.0 - w_a - w_b
        inside = (w_a >= -1e-12) & (w_b >= -1e-12) & (w_c >= -1e-12)
        if not inside.any():
            continue
        inv_z = w_a / Z[a] + w_b / Z[b] + w_c / Z[c]
        depth = np.where(inside, 1.0 / inv_z, np.inf)
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        np.minimum(sub, depth, out=sub)
    return zbuf


def vertex_visibility(cam: Camera, X: np.ndarray, faces: np.ndarray, eps: float = DEPTH_EPS) -> np.ndarray:
    """Visibility of world points ``X`` (``(V, 3)``) against the mesh z-buffer."""
    X = np.asarray(X, dtype=np.float64)
    zbuf = depth_buffer(cam, X, faces)
    vis = np.zeros(len(X), bool)
    front = X[:, 2] > 0
    if not front.any():
        return vis
    uv = project(cam, X[front])
    col = np.floor(uv[:, 0]).astype(int)
    row = np.floor(uv[:, 1]).astype(int)
    onscreen = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    ok = np.zeros(len(uv), bool)
    ok[onscreen] = X[front][onscreen, 2] <= zbuf[row[onscreen], col[onscreen]] + eps
    vis[np.flatnonzero(front)] = ok
    return vis


def visibility(cam: Camera, model: BodyModel, pose: Pose, eps: float = DEPTH_EPS) -> np.ndarray:
    """Per-vertex visibility mask for a single pose."""
    return vertex_visibility(cam, skin_vertices(model, pose), model.faces, eps)
