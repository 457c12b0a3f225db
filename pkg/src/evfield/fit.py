"""Per-sequence estimation of a motion field.

Latent codes (and, depending on the mode, GMP and decoder weights) are
optimized with Adam against the weighted sum of supervised losses, the
contrast term and a standard-normal prior on ``z``.  Supervised gradients
are exact reverse passes; contrast and flow-cosine terms use the analytic
splat gradient with a finite-difference flow Jacobian over a small
parameter vector (``z`` plus, in ``latent+gmp`` mode, the GMP output bias).
GMP input features are treated as constants in the reverse pass.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field as dc_field
from typing import Sequence

import numpy as np

from . import losses as L
from .cmax import ContrastProblem, ContrastWindow, associate, flow_from_vertices, split_windows
from .events import EventStream, window as window_events
from .kinematics import (BodyModel, Camera, Pose, forward_kinematics, forward_kinematics_backward,
                         project, project_backward, skin_vertices, vertex_visibility)
from .motion_field import (MlpDecoder, MotionField, PositionalEncoding, anchor_quats_backward,
                           euler_weights)
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("latent-only", "latent+gmp", "decoder-pretrain")
GROUPS = ("z", "decoder", "gmp")
MODE_GROUPS = {"latent-only": ("z",), "latent+gmp": ("z", "gmp"),
               "decoder-pretrain": ("z", "decoder", "gmp")}


class FitError(RuntimeError):
    pass


class FitDivergence(FitError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class FitConfig:
    weights: L.LossWeights = dc_field(default_factory=L.LossWeights)
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 200
    tol: float = 1e-6
    tol_window: int = 20
    n_windows: int = 4
    mode: str = "latent-only"
    clip_norm: float | None = 10.0
    seed: int = 0
    fd_step: float = 1e-5
    radius: float = 8.0
    threads: int = 1
    # motion field architecture, used when no field is supplied
    d_local: int = 32
    d_global: int = 8
    n_freqs: int = 6
    hidden: tuple = (128, 128, 128, 128)
    skips: tuple = (3,)
    gmp_hidden: tuple = (32,)
    n_steps: int = 50
    init_z_scale: float = 0.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_windows < 1:
            raise ValueError("n_windows must be >= 1")
        if self.tol_window < 1:
            raise ValueError("tol_window must be >= 1")
        self.hidden = tuple(self.hidden)
        self.skips = tuple(self.skips)
        self.gmp_hidden = tuple(self.gmp_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


@dataclass(eq=False)
class Supervision:
    """Ground truth at ``times`` (seconds): joints (3D and/or 2D), poses, per-window flow."""

    times: np.ndarray
    joints: L.JointSet | None = None
    poses: Pose | None = None
    ref_flow: Sequence[np.ndarray] | None = None

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=np.float64))
        if self.joints is not None and self.joints.n_frames != len(self.times):
            raise ValueError("joint frames do not match supervision times")
        if self.poses is not None and self.poses.batch_shape != (len(self.times),):
            raise ValueError("pose frames do not match supervision times")

    @classmethod
    def from_synth(cls, out, joints=True, poses=True, pixels=False) -> "Supervision":
        px = None
        if pixels:
            px = project(out.camera, out.gt_joints)
        js = L.JointSet(out.gt_joints if joints else None, px, out.gt_times) if (joints or pixels) else None
        return cls(out.gt_times, js, out.gt_poses if poses else None)


@dataclass
class Stage:
    name: str
    iters: int
    train: tuple = ("z",)

    def __post_init__(self):
        self.train = tuple(self.train)
        bad = set(self.train) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")
        if self.iters < 0:
            raise ValueError("stage iterations must be >= 0")


def three_stage_schedule(iters_per_stage: int) -> list[Stage]:
    """GMP first, then the motion with GMP frozen, then joint fine-tuning."""
    return [Stage("gmp", iters_per_stage, ("gmp",)),
            Stage("motion", iters_per_stage, ("z", "decoder")),
            Stage("finetune", iters_per_stage, ("z", "decoder", "gmp"))]


@dataclass(eq=False)
class FitReport:
    field: MotionField
    objective: list
    terms: dict
    iterations: int
    seconds: float
    converged: bool
    stop_reason: str
    stages: list
    final_objective: float
    config: FitConfig

    @property
    def params(self) -> dict:
        return {"z": self.field.z.copy(), "decoder": [p.copy() for p in self.field.decoder.params],
                "gmp": [p.copy() for p in self.field.gmp.params]}

    def to_dict(self) -> dict:
        """JSON report: traces, stopping state, stage boundaries, config and latent."""
        return {
            "objective": [float(v) for v in self.objective],
            "terms": {k: [float(v) for v in vs] for k, vs in self.terms.items()},
            "iterations": self.iterations, "seconds": self.seconds,
            "converged": self.converged, "stop_reason": self.stop_reason,
            "stages": self.stages, "final_objective": self.final_objective,
            "config": self.config.to_dict(), "z": self.field.z.tolist(),
        }


class Objective:
    """Weighted objective over a motion field's ``z``, decoder and GMP parameters."""

    def __init__(self, field: MotionField, cam: Camera, events: EventStream | None,
                 supervision: Supervision | None, cfg: FitConfig, contrast_gmp: bool):
        self.field = field
        self.model = field.model
        self.cam = cam
        self.cfg = cfg
        self.sup = supervision
        w = cfg.weights
        self.weights = w if supervision is not None else w.unsupervised()
        self.contrast_gmp = contrast_gmp
        self.events = events if events is not None and len(events) else None
        if self.events is None and supervision is None:
            raise FitError("no events and no supervision: refusing to fit the prior alone")
        if self.events is None and supervision is not None and \
                all(getattr(self.weights, k) == 0 for k in ("ori", "t", "j3d", "j2d")):
            raise FitError("empty event stream with zero supervised weights")
        self._windows = []
        if self.events is not None:
            if self.events.t_end * 1e-6 > field.duration + 1e-9:
                raise ValueError("events extend beyond the motion field duration")
            t0 = self.events.t_start
            for a, b in split_windows(self.events, t0, self.events.t_end, cfg.n_windows):
                self._windows.append((window_events(self.events, a, b), a, b))
        if supervision is not None and supervision.ref_flow is not None and \
                len(supervision.ref_flow) != len(self._windows):
            raise ValueError("one reference flow per contrast window required")

    # parameter plumbing --------------------------------------------------
    def param_groups(self):
        f = self.field
        return {"z": [f.z], "decoder": list(f.decoder.params), "gmp": list(f.gmp.params)}

    def param_list(self):
        g = self.param_groups()
        return g["z"] + g["decoder"] + g["gmp"]

    def mask(self, train) -> list:
        g = self.param_groups()
        return [name in train for name in GROUPS for _ in g[name]]

    def theta(self) -> np.ndarray:
        if self.contrast_gmp:
            return np.concatenate([self.field.z, self.field.gmp.params[-1]])
        return self.field.z.copy()

    def _set_theta(self, theta):
        nz = len(self.field.z)
        self.field.z[...] = theta[:nz]
        if self.contrast_gmp:
            self.field.gmp.params[-1][...] = theta[nz:]

    # contrast windows ------------------------------------------------------
    def _window_vertices(self):
        times = np.array([[a * 1e-6, b * 1e-6] for _, a, b in self._windows]).reshape(-1)
        V = skin_vertices(self.model, self.field.poses(times))
        return V.reshape(len(self._windows), 2, -1, 3)

    def contrast_problem(self) -> ContrastProblem:
        """Freeze visibility and event association at the current parameters."""
        V = self._window_vertices()
        vis, windows = [], []
        for k, (ev, a, b) in enumerate(self._windows):
            v = vertex_visibility(self.cam, V[k, 0], self.model.faces)
            fs = flow_from_vertices(self.cam, V[k, 0], V[k, 1], self.model.faces, a * 1e-6, b * 1e-6, v)
            vis.append(v)
            windows.append(ContrastWindow(ev, a * 1e-6, b * 1e-6, associate(fs, ev, b, self.cfg.radius)))
        base = self.theta()

        def flow_fn(theta):
            self._set_theta(theta)
            try:
                Vt = self._window_vertices()
            finally:
                self._set_theta(base)
            return np.stack([
                flow_from_vertices(self.cam, Vt[k, 0], Vt[k, 1], self.model.faces, 0.0, 1.0, vis[k]).flow
                for k in range(len(windows))
            ])

        return ContrastProblem(windows, flow_fn, self.cfg.threads)

    # evaluation --------------------------------------------------------------
    def evaluate(self, grad: bool = True):
        """Returns ``(total, terms, grads)``; ``grads`` follows :meth:`param_list`."""
        f, w = self.field, self.weights
        terms = {k: 0.0 for k in L.TERMS}
        g_z = np.zeros_like(f.z)
        g_dec = [np.zeros_like(p) for p in f.decoder.params]
        g_gmp = [np.zeros_like(p) for p in f.gmp.params]

        terms["z"] = L.prior(f.z)
        g_z += w.z * f.z

        if self.sup is not None:
            self._supervised(terms, g_z, g_dec, g_gmp, grad)

        if self._windows and (w.c > 0 or (w.flow > 0 and self.sup is not None and self.sup.ref_flow is not None)):
            problem = self.contrast_problem()
            theta = self.theta()
            if w.c > 0:
                if grad:
                    value, g_flows = problem.flow_gradient(theta)
                else:
                    value, g_flows = problem.objective(theta), None
                terms["c"] = value
            else:
                g_flows = None
            g_total_flow = None if g_flows is None else w.c * g_flows
            if w.flow > 0 and self.sup is not None and self.sup.ref_flow is not None:
                flows = problem.flow_fn(theta)
                ref = np.asarray(self.sup.ref_flow, dtype=np.float64)
                terms["flow"] = L.loss_flow(flows, ref)
                gf = w.flow * L.loss_flow_grad(flows, ref)
                g_total_flow = gf if g_total_flow is None else g_total_flow + gf
            if grad and g_total_flow is not None:
                J = problem.flow_jacobian(theta, self.cfg.fd_step)
                g_theta = np.tensordot(J, g_total_flow, axes=g_total_flow.ndim)
                nz = len(f.z)
                g_z += g_theta[:nz]
                if self.contrast_gmp:
                    g_gmp[-1] += g_theta[nz:]

        grads = [g_z] + g_dec + g_gmp
        if not all(np.isfinite(v) for v in terms.values()):
            return float("nan"), terms, grads
        return L.total_loss(terms, w), terms, grads

    def _supervised(self, terms, g_z, g_dec, g_gmp, grad):
        f, w, sup = self.field, self.weights, self.sup
        times = sup.times
        anchored, (q_t, q_0, dcache, _) = f.decode_anchored(times)
        feats = f.gmp_grid_features()
        vel, gcache = f.gmp.forward(feats)
        M = euler_weights(times, f.dt, f.n_steps)
        root_t = f.init.root_t + M @ vel
        pose = f._pose_from_quats(anchored, root_t)
        fk = forward_kinematics(self.model, pose)
        P = fk.positions
        g_pos = np.zeros_like(P)
        g_anch = np.zeros_like(anchored)
        g_root_t = np.zeros_like(root_t)
        js = sup.joints
        if js is not None and js.positions is not None and w.j3d > 0:
            terms["j3d"] = L.loss_3d(P, js.positions)
            g_pos += 2.0 * w.j3d * (P - js.positions)
        if js is not None and js.pixels is not None and w.j2d > 0:
            uv = project(self.cam, P)
            terms["j2d"] = L._sq(uv, js.pixels, "loss_2d")
            g_pos += project_backward(self.cam, P, 2.0 * w.j2d * (uv - js.pixels))
        if sup.poses is not None:
            gt_q = np.concatenate([sup.poses.local[:, 1:], sup.poses.root_rot[:, None]], axis=1)
            if w.ori > 0:
                terms["ori"] = L.loss_ori(anchored, gt_q)
                g_anch += w.ori * L.loss_ori_grad(anchored, gt_q)
            if w.t > 0:
                terms["t"] = L.loss_t(root_t, sup.poses.root_t)
                g_root_t += 2.0 * w.t * (root_t - sup.poses.root_t)
        if not grad:
            return
        g_local, g_root_rot, g_rt = forward_kinematics_backward(self.model, pose, fk, g_pos)
        g_anch[:, :-1] += g_local[:, 1:]
        g_anch[:, -1] += g_root_rot
        g_root_t += g_rt
        gg, _ = f.gmp.backward(gcache, M.T @ g_root_t)
        for a, b in zip(g_gmp, gg):
            a += b
        g_qt, g_q0 = anchor_quats_backward(q_t, q_0, f.init_quats(), g_anch)
        gd, gz = f.decoder.backward(dcache, np.concatenate([g_qt, g_q0[None]], axis=0))
        for a, b in zip(g_dec, gd):
            a += b
        g_z += gz


def _duration(events, supervision, duration):
    if duration is not None:
        return float(duration)
    cands = []
    if supervision is not None:
        cands.append(float(supervision.times.max()))
    if events is not None and len(events):
        cands.append(events.t_end * 1e-6)
    if not cands or max(cands) <= 0:
        raise FitError("cannot infer a positive sequence duration")
    return max(cands)


def make_field(model: BodyModel, init: Pose, duration: float, cfg: FitConfig) -> MotionField:
    fld = MotionField.create(model, init, duration, d_local=cfg.d_local, d_global=cfg.d_global,
                             n_freqs=cfg.n_freqs, hidden=cfg.hidden, skips=cfg.skips,
                             gmp_hidden=cfg.gmp_hidden, n_steps=cfg.n_steps, seed=cfg.seed)
    if cfg.init_z_scale > 0:
        rng = np.random.default_rng(cfg.seed + 1)
        fld.z[...] = rng.normal(0.0, cfg.init_z_scale, fld.z.shape)
    return fld


def staged_fit(events: EventStream | None, model: BodyModel, cam: Camera, init: Pose,
               supervision: Supervision | None, cfg: FitConfig, stages: Sequence[Stage],
               field: MotionField | None = None, duration: float | None = None) -> FitReport:
    """Run ``stages`` in order, each with fresh optimizer moments and its own freeze mask."""
    stages = list(stages)
    if not stages:
        raise ValueError("need at least one stage")
    for s in stages:
        if not isinstance(s, Stage):
            raise ValueError(f"invalid stage entry {s!r}")
    T = _duration(events, supervision, duration)
    fld = make_field(model, init, T, cfg) if field is None else field
    obj = Objective(fld, cam, events, supervision, cfg, contrast_gmp=cfg.mode == "latent+gmp")
    params = obj.param_list()
    trace, terms = [], {k: [] for k in L.TERMS}
    boundaries = []
    converged, reason = False, "max_iters"
    t_start = time.perf_counter()
    it = 0
    for stage in stages:
        opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, clip_norm=cfg.clip_norm)
        mask = obj.mask(stage.train)
        begin = it
        log.info("stage %s: iterations %d..%d, training %s", stage.name, it, it + stage.iters, stage.train)
        stage_trace_start = len(trace)
        for _ in range(stage.iters):
            total, tv, grads = obj.evaluate(grad=True)
            if not np.isfinite(total):
                raise FitDivergence(f"objective is {total} at iteration {it}", list(trace))
            trace.append(total)
            for k in L.TERMS:
                terms[k].append(tv[k])
            opt.step([g if m else np.zeros_like(g) for g, m in zip(grads, mask)], mask=mask)
            it += 1
            n = len(trace) - stage_trace_start
            if n > cfg.tol_window:
                # best value before vs within the last window, robust to oscillation
                prev = min(trace[stage_trace_start:-cfg.tol_window])
                cur = min(trace[-cfg.tol_window:])
                if (prev - cur) / max(abs(prev), 1e-300) < cfg.tol:
                    converged, reason = True, "tolerance"
                    break
        boundaries.append({"name": stage.name, "start": begin, "end": it, "train": list(stage.train)})
    final, _, _ = obj.evaluate(grad=False)
    if not np.isfinite(final):
        raise FitDivergence(f"final objective is {final}", list(trace))
    return FitReport(fld, trace, terms, it, time.perf_counter() - t_start, converged, reason,
                     boundaries, final, cfg)


def fit_latent(events: EventStream | None, model: BodyModel, cam: Camera, init: Pose,
               supervision: Supervision | None = None, cfg: FitConfig | None = None,
               field: MotionField | None = None, duration: float | None = None) -> FitReport:
    """Maximize the posterior over the mode's parameter groups with one Adam run."""
    cfg = FitConfig() if cfg is None else cfg
    stage = Stage(cfg.mode, cfg.max_iters, MODE_GROUPS[cfg.mode])
    return staged_fit(events, model, cam, init, supervision, cfg, [stage], field, duration)


# -- auto-decoder pretraining -----------------------------------------------

@dataclass(eq=False)
class Trajectory:
    """Decoder-order quaternions ``(n, n_quats, 4)`` at ``times`` (seconds)."""

    times: np.ndarray
    quats: np.ndarray

    @classmethod
    def from_poses(cls, times, poses: Pose) -> "Trajectory":
        q = np.concatenate([poses.local[:, 1:], poses.root_rot[:, None]], axis=1)
        return cls(np.asarray(times, dtype=np.float64), q)


@dataclass(eq=False)
class PretrainResult:
    decoder: MlpDecoder
    latents: np.ndarray  # (n_trajectories, latent_dim)
    losses: list


def pretrain_decoder(trajectories: Sequence[Trajectory], cfg: FitConfig, span: float | None = None,
                     decoder: MlpDecoder | None = None) -> PretrainResult:
    """Fit decoder weights and one latent per trajectory by minimizing ``loss_ori``.

    Each iteration draws one trajectory (seeded) and updates its latent and
    the shared decoder.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("need at least one training trajectory")
    n_quats = trajectories[0].quats.shape[1]
    if span is None:
        span = max(float(np.max(tr.times)) for tr in trajectories)
    latent_dim = cfg.d_local + cfg.d_global
    rng = np.random.default_rng(cfg.seed)
    if decoder is None:
        decoder = MlpDecoder(n_quats, latent_dim, PositionalEncoding(cfg.n_freqs, span), hidden=cfg.hidden,
                             skips=cfg.skips, rng=np.random.default_rng(cfg.seed))
    Z = np.zeros((len(trajectories), latent_dim))
    if cfg.init_z_scale > 0:
        Z[...] = rng.normal(0.0, cfg.init_z_scale, Z.shape)
    z_rows = [Z[i] for i in range(len(Z))]
    params = z_rows + list(decoder.params)
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, clip_norm=cfg.clip_norm)
    losses = []
    for _ in range(cfg.max_iters):
        k = int(rng.integers(len(trajectories)))
        tr = trajectories[k]
        q, cache = decoder.forward(z_rows[k], tr.times)
        losses.append(L.loss_ori(q, tr.quats) + cfg.weights.z * L.prior(z_rows[k]))
        gq = L.loss_ori_grad(q, tr.quats)
        gd, gz = decoder.backward(cache, gq)
        grads = [np.zeros_like(z) for z in z_rows] + gd
        grads[k] = gz + cfg.weights.z * z_rows[k]
        mask = [i == k for i in range(len(z_rows))] + [True] * len(gd)
        opt.step(grads, mask=mask)
    return PretrainResult(decoder, Z, losses)
