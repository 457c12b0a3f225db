"""Ground-truth generator: scripted articulated motion rendered as pixel-crossing events.

Points sampled along the projected mesh edges are advanced at ``dt_sim``;
whenever a point's integer pixel changes an event is emitted at the new
pixel.  Polarity is +1 when the point moves along the edge's outward
normal (leading side) and -1 otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot
from .cmax import FlowSamples, vertex_flow
from .events import EventStream
from .kinematics import BodyModel, Camera, Pose, forward_kinematics, skin_vertices, vertex_visibility

KINDS = ("constant", "linear", "quadratic", "keyframes")


class StepSizeError(ValueError):
    """Simulation step moves a point by more than one pixel."""


@dataclass
class JointMotion:
    """Rotation about a fixed axis, ``theta(t) = angle + omega t + alpha t^2 / 2``,
    or slerp through keyframes."""

    kind: str = "constant"
    axis: tuple = (0.0, 0.0, 1.0)
    angle: float = 0.0
    omega: float = 0.0
    alpha: float = 0.0
    key_times: list = field(default_factory=list)
    key_quats: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if np.linalg.norm(self.axis) == 0:
            raise ValueError("rotation axis must be nonzero")
        if self.kind == "keyframes":
            if len(self.key_times) < 1 or len(self.key_times) != len(self.key_quats):
                raise ValueError("keyframes need matching times and quaternions")
            if np.any(np.diff(self.key_times) <= 0):
                raise ValueError("keyframe times must increase")

    def theta(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return np.full_like(t, self.angle)
        if self.kind == "linear":
            return self.angle + self.omega * t
        return self.angle + self.omega * t + 0.5 * self.alpha * t * t

    def quat(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.kind != "keyframes":
            return rot.from_axis_angle(np.broadcast_to(self.axis, (len(t), 3)), self.theta(t))
        kt = np.asarray(self.key_times, dtype=np.float64)
        kq = rot.unit_quaternion(self.key_quats)
        if len(kt) == 1:
            return np.tile(kq[0], (len(t), 1))
        i = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 2)
        u = np.clip((t - kt[i]) / (kt[i + 1] - kt[i]), 0.0, 1.0)
        return rot.slerp(kq[i], kq[i + 1], u)

    def to_dict(self) -> dict:
        d = {"type": self.kind, "axis": list(self.axis)}
        if self.kind == "keyframes":
            d.update(times=list(self.key_times), quats=[list(q) for q in self.key_quats])
        else:
            d.update(angle=self.angle, omega=self.omega, alpha=self.alpha)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JointMotion":
        _check_keys(d, {"type", "axis", "angle", "omega", "alpha", "times", "quats"}, "joint motion")
        return cls(kind=d.get("type", "constant"), axis=tuple(d.get("axis", (0, 0, 1))),
                   angle=float(d.get("angle", 0.0)), omega=float(d.get("omega", 0.0)),
                   alpha=float(d.get("alpha", 0.0)), key_times=list(d.get("times", [])),
                   key_quats=list(d.get("quats", [])))


def _check_keys(d: dict, allowed: set, what: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ValueError(f"unknown {what} key(s): {', '.join(extra)}")


@dataclass
class MotionScript:
    """Script for every joint plus the root.

    JSON schema::

        {"duration": 1.0, "seed": 0,
         "joints": {"1": {"type": "quadratic", "axis": [0,0,1], "alpha": 3.14}},
         "root": {"start": [x,y,z], "velocity": [...], "acceleration": [...]},
         "root_rotation": {"type": "linear", "axis": [0,0,1], "omega": 1.0},
         "camera": {"fx":..., "fy":..., "cx":..., "cy":..., "width":..., "height":...}}

    Joints without an entry keep the identity rotation.
    """

    duration: float
    n_joints: int
    joints: dict = field(default_factory=dict)
    root_start: tuple = (0.0, 0.0, 3.0)
    root_velocity: tuple = (0.0, 0.0, 0.0)
    root_acceleration: tuple = (0.0, 0.0, 0.0)
    root_rotation: JointMotion | None = None
    seed: int = 0
    camera: Camera | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        for j in self.joints:
            if not 0 <= int(j) < self.n_joints:
                raise ValueError(f"scripted joint {j} out of range")

    def poses(self, times) -> Pose:
        t = np.atleast_1d(np.asarray(times, dtype=np.float64))
        local = np.tile(rot.IDENTITY, (len(t), self.n_joints, 1))
        for j, m in self.joints.items():
            local[:, int(j)] = m.quat(t)
        root_rot = np.tile(rot.IDENTITY, (len(t), 1)) if self.root_rotation is None else self.root_rotation.quat(t)
        root_t = (np.asarray(self.root_start) + t[:, None] * np.asarray(self.root_velocity)
                  + 0.5 * (t * t)[:, None] * np.asarray(self.root_acceleration))
        return Pose(local, root_rot, root_t)

    __call__ = poses

    def initial_pose(self) -> Pose:
        return self.poses([0.0])[0]

    def to_dict(self) -> dict:
        d = {
            "duration": self.duration, "seed": self.seed,
            "joints": {str(j): m.to_dict() for j, m in self.joints.items()},
            "root": {"start": list(self.root_start), "velocity": list(self.root_velocity),
                     "acceleration": list(self.root_acceleration)},
        }
        if self.root_rotation is not None:
            d["root_rotation"] = self.root_rotation.to_dict()
        if self.camera is not None:
            d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, n_joints: int) -> "MotionScript":
        _check_keys(d, {"duration", "seed", "joints", "root", "root_rotation", "camera"}, "motion script")
        root = d.get("root", {})
        _check_keys(root, {"start", "velocity", "acceleration"}, "root")
        return cls(
            duration=float(d["duration"]), n_joints=n_joints,
            joints={int(k): JointMotion.from_dict(v) for k, v in d.get("joints", {}).items()},
            root_start=tuple(root.get("start", (0.0, 0.0, 3.0))),
            root_velocity=tuple(root.get("velocity", (0.0, 0.0, 0.0))),
            root_acceleration=tuple(root.get("acceleration", (0.0, 0.0, 0.0))),
            root_rotation=JointMotion.from_dict(d["root_rotation"]) if "root_rotation" in d else None,
            seed=int(d.get("seed", 0)),
            camera=Camera.from_dict(d["camera"]) if "camera" in d else None,
        )

    @classmethod
    def load(cls, path, n_joints: int) -> "MotionScript":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), n_joints)


@dataclass(eq=False)
class SynthOutput:
    events: EventStream
    model: BodyModel
    camera: Camera
    script: MotionScript
    gt_times: np.ndarray
    gt_poses: Pose
    gt_joints: np.ndarray
    window_flows: list

    def gt_flow(self, t_i: float, t_j: float) -> FlowSamples:
        return gt_flow(self, t_i, t_j)


def gt_flow(output: SynthOutput, t_i: float, t_j: float) -> FlowSamples:
    """Exact projected vertex displacement between two times of the scripted motion."""
    T = output.script.duration
    if not (0.0 <= t_i <= t_j <= T + 1e-12):
        raise ValueError(f"window [{t_i}, {t_j}] outside [0, {T}]")
    return vertex_flow(output.model, output.camera, output.script, t_i, t_j)


def _edge_samples(model: BodyModel, samples_per_edge: int, rng):
    edges = model.edges()
    if not len(edges):
        raise ValueError("model has no mesh edges to sample")
    u = rng.uniform(0.0, 1.0, size=(len(edges), samples_per_edge))
    s = (np.arange(samples_per_edge)[None, :] + u) / samples_per_edge
    # adjacent face of each edge, used to orient the outward normal
    face_of = {}
    for fi, f in enumerate(model.faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            face_of.setdefault((min(a, b), max(a, b)), fi)
    adj = np.array([face_of[(a, b)] for a, b in edges])
    return edges, s.reshape(-1), np.repeat(np.arange(len(edges)), samples_per_edge), adj


def generate(model: BodyModel, cam: Camera, script: MotionScript, samples_per_edge: int = 32,
             dt_sim: float = 1e-4, gt_rate: float = 100.0, n_windows: int = 4,
             occlusion: bool = True, visibility_every: int = 50, chunk_steps: int = 256) -> SynthOutput:
    """Render ``script`` into events.  Deterministic given ``script.seed``."""
    if script.n_joints != model.n_joints:
        raise ValueError("script and model joint counts differ")
    if not dt_sim > 0:
        raise ValueError("dt_sim must be positive")
    rng = np.random.default_rng(script.seed)
    edges, s, point_edge, adj = _edge_samples(model, samples_per_edge, rng)
    ea, eb = edges[point_edge, 0], edges[point_edge, 1]
    n_steps = int(np.ceil(script.duration / dt_sim - 1e-9))
    times = np.minimum(np.arange(n_steps + 1) * dt_sim, script.duration)
    faces = model.faces

    ts_out, xs_out, ys_out, ps_out = [], [], [], []
    prev_pix = prev_uv = prev_ok = None
    vis_points = np.ones(len(s), bool)
    for start in range(0, n_steps + 1, chunk_steps):
        tk = times[start:start + chunk_steps]
        V = skin_vertices(model, script.poses(tk))  # (n, V, 3)
        P = (1.0 - s)[None, :, None] * V[:, ea] + s[None, :, None] * V[:, eb]
        Z = P[..., 2]
        front = Z > 1e-9
        Zs = np.where(front, Z, 1.0)
        uv = np.stack([cam.fx * P[..., 0] / Zs + cam.cx, cam.fy * P[..., 1] / Zs + cam.cy], -1)
        # outward normals of the projected edges
        Vz = np.where(V[..., 2:] > 1e-9, V[..., 2:], 1.0)
        Vuv = np.stack([cam.fx * V[..., 0] / Vz[..., 0] + cam.cx, cam.fy * V[..., 1] / Vz[..., 0] + cam.cy], -1)
        for k in range(len(tk)):
            step = start + k
            if occlusion and step % visibility_every == 0:
                vis_v = vertex_visibility(cam, V[k], faces)
                vis_points = vis_v[ea] & vis_v[eb]
            pix = np.floor(uv[k]).astype(np.int64)
            ok = front[k]
            if prev_uv is not None:
                both = ok & prev_ok
                move = uv[k] - prev_uv
                if np.any(np.abs(move[both]) > 1.0 + 1e-9):
                    raise StepSizeError(
                        f"a point moved {np.abs(move[both]).max():.3f} px in one step; reduce dt_sim"
                    )
                changed = both & np.any(pix != prev_pix, axis=1) & vis_points
                inb = (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
                emit = np.flatnonzero(changed & inb)
                if len(emit):
                    e = point_edge[emit]
                    a, b = Vuv[k, edges[e, 0]], Vuv[k, edges[e, 1]]
                    d = b - a
                    normal = np.stack([-d[:, 1], d[:, 0]], 1)
                    cen = Vuv[k][faces[adj[e]]].mean(axis=1)
                    flip = np.sum(normal * (cen - 0.5 * (a + b)), axis=1) > 0
                    normal[flip] *= -1
                    nm = np.sum(normal * move[emit], axis=1)
                    # motion along the edge has no normal component; orient it by the edge direction
                    along = np.abs(nm) <= 1e-12 * np.linalg.norm(normal, axis=1) * np.linalg.norm(move[emit], axis=1)
                    nm = np.where(along, np.sum(d * move[emit], axis=1), nm)
                    lead = nm >= 0
                    ts_out.append(np.full(len(emit), int(round(times[step] * 1e6)), np.int64))
                    xs_out.append(pix[emit, 0])
                    ys_out.append(pix[emit, 1])
                    ps_out.append(np.where(lead, 1, -1).astype(np.int8))
            prev_pix, prev_uv, prev_ok = pix, uv[k], ok

    cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dt)
    events = EventStream(
        cat(ts_out, np.int64), cat(xs_out, np.int64), cat(ys_out, np.int64), cat(ps_out, np.int8),
        cam.width, cam.height, 0, int(round(script.duration * 1e6)),
    )
    n_gt = int(np.floor(script.duration * gt_rate + 1e-9)) + 1
    gt_times = np.arange(n_gt) / gt_rate
    gt_poses = script.poses(gt_times)
    gt_joints = forward_kinematics(model, gt_poses).positions
    out = SynthOutput(events, model, cam, script, gt_times, gt_poses, gt_joints, [])
    edges_t = np.linspace(0.0, script.duration, n_windows + 1)
    out.window_flows = [gt_flow(out, a, b) for a, b in zip(edges_t[:-1], edges_t[1:])]
    return out


def noise(stream: EventStream, rate_per_px_s: float, seed: int = 0) -> EventStream:
    """Add uniform background events (Poisson count) with random polarity."""
    if rate_per_px_s < 0:
        raise ValueError("rate must be >= 0")
    if rate_per_px_s == 0:
        return stream
    rng = np.random.default_rng(seed)
    span_us = max(stream.t_end - stream.t_start, 0)
    lam = rate_per_px_s * stream.width * stream.height * span_us * 1e-6
    n = int(rng.poisson(lam))
    t = rng.integers(stream.t_start, max(stream.t_end, stream.t_start + 1), size=n)
    x = rng.integers(0, stream.width, size=n)
    y = rng.integers(0, stream.height, size=n)
    p = rng.choice(np.array([-1, 1], np.int8), size=n)
    allt = np.concatenate([stream.t, t])
    order = np.argsort(allt, kind="stable")
    return EventStream(
        allt[order], np.concatenate([stream.x, x])[order], np.concatenate([stream.y, y])[order],
        np.concatenate([stream.p, p])[order], stream.width, stream.height, stream.t_start, stream.t_end,
    )


def bar_script(flow_px_per_window=(3.0, -2.0), n_windows: int = 4, window_s: float = 0.01,
               depth: float = 2.0, cam: Camera | None = None, start_px=None, seed: int = 0) -> MotionScript:
    """Rigid translation of a single-joint template producing the given image flow."""
    cam = Camera.default() if cam is None else cam
    fu, fv = flow_px_per_window
    vx = fu * depth / (cam.fx * window_s)
    vy = fv * depth / (cam.fy * window_s)
    if start_px is None:
        start_px = (cam.cx - 0.5 * fu * n_windows, cam.cy - 0.5 * fv * n_windows)
    x0 = (start_px[0] - cam.cx) * depth / cam.fx
    y0 = (start_px[1] - cam.cy) * depth / cam.fy
    return MotionScript(duration=n_windows * window_s, n_joints=1, root_start=(x0, y0, depth),
                        root_velocity=(vx, vy, 0.0), seed=seed, camera=cam)
