"""Contrast maximization on mesh-induced flow.

Vertex flow between two times is the displacement of each projected
vertex.  Every event borrows the flow of its nearest visible vertex (within
``radius`` pixels), scaled by its time to the reference time, and is
warped to the reference time.  The objective is the negative variance of
the per-polarity image of warped events.

Sign conventions: ``FlowSamples.flow`` is forward motion
``pi(V(t_j)) - pi(V(t_i))``.  A displacement ``d`` moves an event to
``x - d``, so warping forward to ``t_ref`` uses
``d_k = -flow * (t_ref - t_k) / (t_j - t_i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .events import EventStream, window as window_events
from .kinematics import Camera, project, skin_vertices, vertex_visibility, BodyModel
from .voxel import PolarityImagePair, _bilinear, accumulate, warped_positions

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 8.0
MAX_PARAMS = 256


@dataclass(frozen=True, eq=False)
class FlowSamples:
    flow: np.ndarray  # (V, 2) pixels, zero where not visible
    visible: np.ndarray  # (V,) bool
    anchors: np.ndarray  # (V, 2) pixel positions at t_i
    t_i: float
    t_j: float


@dataclass(frozen=True, eq=False)
class Iwe:
    image: PolarityImagePair
    displacements: np.ndarray


def _poses(source, times):
    return source.poses(times) if hasattr(source, "poses") else source(times)


def vertex_flow(model: BodyModel, cam: Camera, source, t_i: float, t_j: float,
                visible: np.ndarray | None = None) -> FlowSamples:
    """Projected vertex displacement between ``t_i`` and ``t_j`` (seconds).

    ``source`` is a motion field (anything with ``poses(times)``) or a
    callable returning a batched :class:`Pose`.  Visibility is evaluated at
    ``t_i`` unless given; vertices behind the camera at either time are
    masked out.
    """
    if not t_i <= t_j:
        raise ValueError("need t_i <= t_j")
    V = skin_vertices(model, _poses(source, np.array([t_i, t_j])))
    return flow_from_vertices(cam, V[0], V[1], model.faces, t_i, t_j, visible)


def flow_from_vertices(cam, V_i, V_j, faces, t_i, t_j, visible=None) -> FlowSamples:
    front = (V_i[:, 2] > 0) & (V_j[:, 2] > 0)
    if visible is None:
        visible = vertex_visibility(cam, V_i, faces)
    visible = np.asarray(visible, bool) & front
    anchors = np.zeros((len(V_i), 2))
    flow = np.zeros((len(V_i), 2))
    if front.any():
        a = project(cam, V_i[front])
        b = project(cam, V_j[front])
        anchors[front] = a
        flow[front] = b - a
    flow[~visible] = 0.0
    return FlowSamples(flow, visible, anchors, float(t_i), float(t_j))


@dataclass(frozen=True, eq=False)
class Association:
    """Frozen event->vertex assignment and per-event flow scale."""

    vertex: np.ndarray  # (n,) int, -1 for no vertex in range
    scale: np.ndarray  # (n,) (t_ref - t_k) / (t_j - t_i)

    def displacements(self, flow: np.ndarray) -> np.ndarray:
        d = np.zeros((len(self.vertex), 2))
        ok = self.vertex >= 0
        d[ok] = -flow[self.vertex[ok]] * self.scale[ok, None]
        return d


def associate(flow: FlowSamples, events: EventStream, t_ref_us: int | None = None,
              radius: float = DEFAULT_RADIUS) -> Association:
    """Nearest visible anchor within ``radius`` px for each event."""
    t_ref_us = events.t_end if t_ref_us is None else t_ref_us
    span = flow.t_j - flow.t_i
    scale = (t_ref_us - events.t) * 1e-6 / span if span > 0 else np.zeros(len(events))
    vertex = np.full(len(events), -1, dtype=np.int64)
    cand = np.flatnonzero(flow.visible)
    if len(cand) == 0:
        if len(events):
            log.warning("no visible vertices: all displacements are zero")
        return Association(vertex, scale)
    if len(events):
        tree = cKDTree(flow.anchors[cand])
        pts = np.stack([events.x, events.y], axis=1).astype(np.float64)
        dist, idx = tree.query(pts, k=1, distance_upper_bound=radius)
        hit = np.isfinite(dist)
        vertex[hit] = cand[idx[hit]]
    return Association(vertex, scale)


def flow_to_events(flow: FlowSamples, events: EventStream, t_ref_us: int | None = None,
                   radius: float = DEFAULT_RADIUS) -> np.ndarray:
    return associate(flow, events, t_ref_us, radius).displacements(flow.flow)


def image_variance(img) -> float:
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    return float(np.mean((img - img.mean()) ** 2))


def iwe_variance(iwe: Iwe | PolarityImagePair) -> float:
    """Objective value: ``Var(pos) + Var(neg)``."""
    img = iwe.image if isinstance(iwe, Iwe) else iwe
    return image_variance(img.pos) + image_variance(img.neg)


def iwe_variance_report(iwe: Iwe | PolarityImagePair) -> dict:
    img = iwe.image if isinstance(iwe, Iwe) else iwe
    vp, vn = image_variance(img.pos), image_variance(img.neg)
    return {"pos": vp, "neg": vn, "combined": image_variance(img.pos + img.neg), "objective": vp + vn}


def warp(events: EventStream, displacements, t_ref_us=None, threads: int = 1) -> Iwe:
    d = np.asarray(displacements, dtype=np.float64)
    return Iwe(accumulate(events, d, t_ref_us, threads=threads), d)


def variance_gradient(events: EventStream, displacements, image: PolarityImagePair | None = None):
    """``d(Var(pos) + Var(neg)) / d displacement``, shape ``(n, 2)``.

    With ``G = 2 (I - mean(I)) / (H W)`` per channel, the derivative of the
    bilinear splat w.r.t. the warped position gives the event's share;
    ``x' = x - d`` flips the sign.
    """
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    if image is None:
        image = accumulate(events, d)
    H, W = events.height, events.width
    G = np.stack([image.pos - image.pos.mean(), image.neg - image.neg.mean()]) * (2.0 / (H * W))
    G = G.reshape(2, -1)
    xw, yw = warped_positions(events, d)
    idx, _ = _bilinear(xw, yw, W, H)
    fx = xw - np.floor(xw)
    fy = yw - np.floor(yw)
    x0 = np.floor(xw).astype(np.int64)
    y0 = np.floor(yw).astype(np.int64)
    ch = np.where(events.p > 0, 0, 1)
    g = []
    for (dx, dy), i in zip(((0, 0), (1, 0), (0, 1), (1, 1)), idx):
        cx, cy = x0 + dx, y0 + dy
        ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        g.append(np.where(ok, G[ch, i], 0.0))
    g00, g10, g01, g11 = g
    d_xw = (1 - fy) * (g10 - g00) + fy * (g11 - g01)
    d_yw = (1 - fx) * (g01 - g00) + fx * (g11 - g10)
    return -np.stack([d_xw, d_yw], axis=1)


@dataclass(eq=False)
class ContrastWindow:
    events: EventStream
    t_i: float  # seconds
    t_j: float
    assoc: Association


class ContrastProblem:
    """Mean of ``-Var(IWE)`` over windows, as a function of parameters ``theta``.

    ``flow_fn(theta)`` returns per-window vertex flows ``(N_w, V, 2)``.
    Associations (and any visibility inside ``flow_fn``) stay frozen until
    :meth:`refresh` is called.
    """

    def __init__(self, windows: Sequence[ContrastWindow], flow_fn: Callable[[np.ndarray], np.ndarray],
                 threads: int = 1):
        if not windows or all(len(w.events) == 0 for w in windows):
            raise ValueError("no events in the contrast windows")
        self.windows = list(windows)
        self.flow_fn = flow_fn
        self.threads = threads

    def displacements(self, theta):
        flows = self.flow_fn(np.asarray(theta, dtype=np.float64))
        return [w.assoc.displacements(f) for w, f in zip(self.windows, flows)]

    def variances(self, theta) -> np.ndarray:
        out = []
        for w, d in zip(self.windows, self.displacements(theta)):
            out.append(iwe_variance(accumulate(w.events, d, threads=self.threads)) if len(w.events) else 0.0)
        return np.array(out)

    def objective(self, theta) -> float:
        return -float(np.mean(self.variances(theta)))

    def flow_gradient(self, theta):
        """Objective and its gradient w.r.t. the per-window vertex flows."""
        flows = self.flow_fn(np.asarray(theta, dtype=np.float64))
        nw = len(self.windows)
        g_flows = np.zeros_like(flows)
        total = 0.0
        for k, (w, f) in enumerate(zip(self.windows, flows)):
            if not len(w.events):
                continue
            d = w.assoc.displacements(f)
            img = accumulate(w.events, d, threads=self.threads)
            total += iwe_variance(img)
            gd = variance_gradient(w.events, d, img)
            ok = w.assoc.vertex >= 0
            # d_k = -flow[v_k] * s_k; objective carries a -1/N_w factor
            contrib = gd[ok] * w.assoc.scale[ok, None] / nw
            np.add.at(g_flows[k], w.assoc.vertex[ok], contrib)
        return -total / nw, g_flows

    def flow_jacobian(self, theta, h: float = 1e-5):
        """Central-difference Jacobian of ``flow_fn``, shape ``(P, N_w, V, 2)``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size > MAX_PARAMS:
            raise ValueError(f"{theta.size} contrast parameters exceed the cap of {MAX_PARAMS}")
        cols = []
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e.flat[i] = h
            cols.append((self.flow_fn(theta + e) - self.flow_fn(theta - e)) / (2 * h))
        return np.array(cols)

    def gradient(self, theta, h: float = 1e-5):
        """Objective and ``d objective / d theta``."""
        value, g_flows = self.flow_gradient(theta)
        J = self.flow_jacobian(theta, h)
        return value, np.tensordot(J, g_flows, axes=g_flows.ndim).reshape(np.shape(theta))


def contrast_objective(problem: ContrastProblem, theta) -> float:
    return problem.objective(theta)


def contrast_gradient(problem: ContrastProblem, theta, h: float = 1e-5):
    return problem.gradient(theta, h)[1]


def split_windows(events: EventStream, t0_us: int, t1_us: int, n_windows: int):
    """Equal windows ``[(a_us, b_us), ...]`` covering ``[t0, t1)``."""
    if n_windows < 1 or t1_us <= t0_us:
        raise ValueError("invalid window partition")
    edges = np.rint(np.linspace(t0_us, t1_us, n_windows + 1)).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def global_flow_problem(events: EventStream, n_windows: int = 1, t0_us=None, t1_us=None,
                        threads: int = 1) -> ContrastProblem:
    """Problem whose parameters are one image-plane flow (px per window) shared by all events."""
    t0_us = events.t_start if t0_us is None else t0_us
    t1_us = events.t_end if t1_us is None else t1_us
    windows = []
    for a, b in split_windows(events, t0_us, t1_us, n_windows):
        ev = window_events(events, a, b)
        scale = (b - ev.t) / float(b - a)
        windows.append(ContrastWindow(ev, a * 1e-6, b * 1e-6, Association(np.zeros(len(ev), np.int64), scale)))
    return ContrastProblem(windows, lambda th: np.broadcast_to(np.reshape(th, (1, 1, 2)), (len(windows), 1, 2)).copy(),
                           threads)


@dataclass
class GlobalFlowResult:
    flow: np.ndarray
    variance_before: float
    variance_after: float
    iterations: int
    trace: list


def fit_global_flow(events: EventStream, n_windows: int = 1, init=None, search: float = 8.0,
                    lr: float = 0.05, iters: int = 100, threads: int = 1) -> GlobalFlowResult:
    """Contrast-maximizing global flow, reported in pixels per window.

    The flow is constant, so it is fitted as one displacement over the whole
    span and divided by ``n_windows``; short windows hold too few pixel
    crossings and the variance locks onto integer-lattice artifacts.  A
    coarse grid over ``[-search, search]^2`` per window seeds Adam ascent on
    the analytic gradient.
    """
    from .optim import Adam

    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    problem = global_flow_problem(events, 1, threads=threads)
    zero = np.zeros(2)
    before = -problem.objective(zero)
    if init is None:
        r = search * n_windows
        best, theta = -np.inf, zero
        for step, half in ((4.0, r), (1.0, 4.0), (0.25, 1.0)):
            cu, cv = theta
            grid = np.arange(-half, half + 1e-9, step)
            for u in cu + grid:
                for v in cv + grid:
                    val = -problem.objective(np.array([u, v]))
                    if val > best:
                        best, cand = val, np.array([u, v])
            theta = cand
    else:
        theta = np.asarray(init, dtype=np.float64) * n_windows
    opt = Adam([theta], lr=lr)
    trace = []
    best_val, best_theta = np.inf, theta.copy()
    for it in range(iters):
        val, g = problem.gradient(theta)
        trace.append(val)
        if val < best_val:
            best_val, best_theta = val, theta.copy()
        opt.step([g])
    val = problem.objective(theta)
    if val < best_val:
        best_val, best_theta = val, theta.copy()
    return GlobalFlowResult(best_theta / n_windows, before, -best_val, iters, trace)
