"""Supervised losses and pose-evaluation metrics.

Losses are sums in SI units; metrics report millimeters.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import rotations as rot

TERMS = ("ori", "t", "j3d", "j2d", "flow", "c", "z")


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights of :func:`total_loss`; ``z`` weights the ``1/2 ||z||^2`` prior."""

    ori: float = 10.0
    t: float = 10.0
    j3d: float = 20.0
    j2d: float = 20.0
    flow: float = 0.1
    c: float = 0.1
    z: float = 1e-2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"weight {f.name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kw) -> "LossWeights":
        d = self.as_dict()
        d.update(kw)
        return LossWeights(**d)

    def unsupervised(self) -> "LossWeights":
        """Same weights with every supervised term switched off."""
        return self.replace(ori=0.0, t=0.0, j3d=0.0, j2d=0.0)


def _same_shape(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {a.shape} != {b.shape}")
    return a, b


def loss_ori(pred, gt) -> float:
    """Sum of geodesic distances ``||log(R R_gt^T)||_F``.

    Accepts quaternions ``(..., 4)`` or rotation matrices ``(..., 3, 3)``.
    """
    pred, gt = _same_shape(pred, gt, "loss_ori")
    if pred.shape[-2:] == (3, 3):
        return float(np.sum(rot.geodesic(pred, gt)))
    return float(np.sum(rot.quat_geodesic(pred, gt)))


def loss_ori_grad(pred_q, gt_q) -> np.ndarray:
    """Gradient of :func:`loss_ori` w.r.t. quaternion predictions."""
    pred_q, gt_q = _same_shape(pred_q, gt_q, "loss_ori")
    return rot.quat_geodesic_backward(pred_q, gt_q, np.ones(pred_q.shape[:-1]))


def _sq(pred, gt, what):
    pred, gt = _same_shape(pred, gt, what)
    return float(np.sum((pred - gt) ** 2))


def loss_t(pred, gt) -> float:
    """Sum of squared root-translation errors."""
    return _sq(pred, gt, "loss_t")


def loss_3d(pred, gt) -> float:
    """Sum of squared 3D joint errors."""
    return _sq(pred, gt, "loss_3d")


def loss_2d(pred_3d, gt_px, cam) -> float:
    """Sum of squared pixel errors after projecting the 3D predictions."""
    from .kinematics import project

    return _sq(project(cam, pred_3d), gt_px, "loss_2d")


def loss_flow(shape_flow, ref_flow) -> float:
    """``sum(1 - cos)`` between flow vectors; zero-length vectors on either side are skipped."""
    a, b = _same_shape(shape_flow, ref_flow, "loss_flow")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        warnings.warn("loss_flow: no pair of nonzero flow vectors", RuntimeWarning, stacklevel=2)
        return 0.0
    cos = np.sum(a[ok] * b[ok], axis=-1) / (na[ok] * nb[ok])
    return float(np.sum(1.0 - cos))


def loss_flow_grad(shape_flow, ref_flow) -> np.ndarray:
    """Gradient of :func:`loss_flow` w.r.t. ``shape_flow``."""
    a, b = _same_shape(shape_flow, ref_flow, "loss_flow")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na_s * nb_s)
    g = -(b / (na_s * nb_s) - cos * a / (na_s * na_s))
    return np.where(ok, g, 0.0)


def prior(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * float(z @ z)


def total_loss(components: dict, w: LossWeights) -> float:
    """Weighted sum of named components (keys from ``TERMS``; ``z`` is the prior value)."""
    total = 0.0
    for k, v in components.items():
        if k not in TERMS:
            raise KeyError(f"unknown loss term {k!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"loss term {k} is not finite ({v})")
        total += getattr(w, k) * v
    return total


# -- joint sets --------------------------------------------------------------

@dataclass(eq=False)
class JointSet:
    """Per-frame joint positions: 3D meters ``(F, J, 3)`` and/or pixels ``(F, J, 2)``."""

    positions: np.ndarray | None = None
    pixels: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        if self.positions is None and self.pixels is None:
            raise ValueError("joint set needs 3D positions or pixels")
        shapes = []
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
                raise ValueError("positions must be (frames, joints, 3)")
            shapes.append(self.positions.shape[:2])
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
            if self.pixels.ndim != 3 or self.pixels.shape[-1] != 2:
                raise ValueError("pixels must be (frames, joints, 2)")
            shapes.append(self.pixels.shape[:2])
        if len(set(shapes)) != 1:
            raise ValueError("3D and 2D joint arrays disagree on frames/joints")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64)
            if self.times.shape != (shapes[0][0],):
                raise ValueError("one time per frame required")

    @property
    def n_frames(self) -> int:
        return (self.positions if self.positions is not None else self.pixels).shape[0]

    @property
    def n_joints(self) -> int:
        return (self.positions if self.positions is not None else self.pixels).shape[1]


def write_joints_csv(js: JointSet, path_or_buf=None) -> str:
    """CSV ``frame,joint,x,y,z[,t_s]`` (3D) or ``frame,joint,u,v[,t_s]`` (2D only)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    three_d = js.positions is not None
    arr = js.positions if three_d else js.pixels
    head = ["frame", "joint"] + (["x", "y", "z"] if three_d else ["u", "v"])
    if js.times is not None:
        head.append("t_s")
    w.writerow(head)
    for f in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            row = [f, j] + [repr(float(v)) for v in arr[f, j]]
            if js.times is not None:
                row.append(repr(float(js.times[f])))
            w.writerow(row)
    text = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
    return text


def read_joints_csv(path_or_text) -> JointSet:
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
    elif isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not rows:
        raise ValueError("empty joint file")
    head = [h.strip() for h in rows[0]]
    if head[:2] != ["frame", "joint"]:
        raise ValueError("joint CSV must start with a frame,joint header")
    three_d = head[2:5] == ["x", "y", "z"]
    if not three_d and head[2:4] != ["u", "v"]:
        raise ValueError("joint CSV needs x,y,z or u,v columns")
    n_coord = 3 if three_d else 2
    has_t = "t_s" in head
    body = rows[1:]
    try:
        frame = np.array([int(r[0]) for r in body], dtype=np.int64)
        joint = np.array([int(r[1]) for r in body], dtype=np.int64)
        vals = np.array([[float(v) for v in r[2:2 + n_coord]] for r in body]).reshape(-1, n_coord)
        tcol = np.array([float(r[head.index("t_s")]) for r in body]) if has_t else None
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed joint CSV: {exc}") from exc
    if not len(body):
        raise ValueError("joint file has no rows")
    F, J = frame.max() + 1, joint.max() + 1
    if len(body) != F * J or frame.min() < 0 or joint.min() < 0:
        raise ValueError("joint CSV must list every (frame, joint) pair exactly once")
    arr = np.full((F, J, n_coord), np.nan)
    arr[frame, joint] = vals
    if np.isnan(arr).any():
        raise ValueError("joint CSV has duplicate or missing (frame, joint) pairs")
    times = None
    if has_t:
        times = np.zeros(F)
        times[frame] = tcol
    return JointSet(arr, None, times) if three_d else JointSet(None, arr, times)


# -- metrics -----------------------------------------------------------------

def _positions(a):
    if isinstance(a, JointSet):
        if a.positions is None:
            raise ValueError("metric needs 3D positions")
        return a.positions
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _pair(pred, gt):
    p, g = _positions(pred), _positions(gt)
    if p.shape != g.shape:
        raise ValueError(f"joint sets differ: {p.shape} vs {g.shape}")
    return p, g


def _errors(p, g):
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean joint position error in mm (inputs in meters)."""
    p, g = _pair(pred, gt)
    return 1000.0 * float(np.mean(_errors(p, g)))


def pel_mpjpe(pred, gt, pelvis: int = 0) -> float:
    """MPJPE after subtracting the pelvis joint from both sides."""
    return 1000.0 * float(np.mean(pel_frame_errors(pred, gt, pelvis)))


def similarity_align(src, dst):
    """Least-squares ``s R src + t`` onto ``dst`` for ``(J, 3)`` point sets.

    Returns ``(s, R, t)``; the rotation is proper (det +1).  Returns ``None``
    when ``dst`` has fewer than three non-collinear points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    A, B = src - mu_s, dst - mu_d
    if len(src) < 3 or np.linalg.matrix_rank(B, tol=1e-9 * max(1.0, np.abs(B).max())) < 2:
        return None
    U, S, Vt = np.linalg.svd(B.T @ A)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1] = -1.0
    R = (U * D) @ Vt
    var_s = np.sum(A * A)
    s = float(np.sum(S * D) / var_s) if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _frame_reduce(err, squared):
    return np.sum(err * err, axis=-1) if squared else np.mean(err, axis=-1)


def pel_frame_errors(pred, gt, pelvis: int = 0, squared: bool = False) -> np.ndarray:
    """Per-frame pelvis-aligned error: mean joint distance, or sum of squares."""
    p, g = _pair(pred, gt)
    return _frame_reduce(_errors(p - p[:, pelvis:pelvis + 1], g - g[:, pelvis:pelvis + 1]), squared)


def pa_frame_errors(pred, gt, pelvis: int = 0, squared: bool = False) -> np.ndarray:
    """Per-frame Procrustes-aligned error (meters): mean joint distance, or sum of squares.

    The alignment minimizes the sum of squares, so only the ``squared``
    form is guaranteed not to exceed the pelvis-aligned value.
    """
    p, g = _pair(pred, gt)
    out = np.empty(len(p))
    fallback = 0
    for f in range(len(p)):
        fit = similarity_align(p[f], g[f])
        if fit is None:
            fallback += 1
            out[f] = _frame_reduce(_errors(p[f] - p[f, pelvis], g[f] - g[f, pelvis]), squared)
            continue
        s, R, t = fit
        out[f] = _frame_reduce(_errors(s * p[f] @ R.T + t, g[f]), squared)
    if fallback:
        warnings.warn(f"pa_mpjpe: {fallback} degenerate frame(s) fell back to pelvis alignment",
                      RuntimeWarning, stacklevel=2)
    return out


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame similarity (rotation, translation, scale) alignment."""
    return 1000.0 * float(np.mean(pa_frame_errors(pred, gt)))


def pckh(pred, gt, head_len: float, thresh: float = 0.5) -> float:
    """Fraction of joints with error below ``thresh * head_len``."""
    if not head_len > 0:
        raise ValueError("head length must be positive")
    p, g = _pair(pred, gt)
    return float(np.mean(_errors(p, g) < thresh * head_len))


def evaluate(pred, gt, head_len: float) -> dict:
    return {"mpjpe": mpjpe(pred, gt), "pa_mpjpe": pa_mpjpe(pred, gt),
            "pel_mpjpe": pel_mpjpe(pred, gt), "pckh": pckh(pred, gt, head_len)}
