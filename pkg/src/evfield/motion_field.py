"""Continuous-time motion field: time encoding, pose decoder, root anchoring,
global velocity regression and Euler integration of the root translation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .kinematics import BodyModel, Pose, forward_kinematics
from .nn import Mlp

TIME_TOL = 1e-12


class DomainError(ValueError):
    """Query time outside the motion field's domain."""


@dataclass(frozen=True)
class PositionalEncoding:
    n_freqs: int = 6
    span: float = 1.0

    def __post_init__(self):
        if self.n_freqs < 1:
            raise ValueError("need at least one frequency")
        if not self.span > 0:
            raise ValueError("span must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.n_freqs

    def __call__(self, t) -> np.ndarray:
        """``[sin(2^k pi t/T) for k] + [cos(2^k pi t/T) for k]`` for each time."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < -TIME_TOL) or np.any(t > self.span + TIME_TOL):
            raise DomainError(f"time outside [0, {self.span}]")
        arg = np.pi * (t / self.span)[:, None] * (2.0 ** np.arange(self.n_freqs))[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def encode_time(pe: PositionalEncoding, t) -> np.ndarray:
    return pe(t)


class MlpDecoder:
    """Maps ``(encode(t), z_l, z_g)`` to ``n_quats`` unit quaternions.

    Raw outputs are offsets from the identity quaternion and get normalized,
    so a zero last layer decodes the rest pose.
    """

    def __init__(self, n_quats: int, latent_dim: int, pe: PositionalEncoding, hidden=(128,) * 4,
                 skips=(3,), activation="tanh", mlp: Mlp | None = None, rng=None):
        self.n_quats = int(n_quats)
        self.latent_dim = int(latent_dim)
        self.pe = pe
        in_dim = pe.dim + self.latent_dim
        if mlp is None:
            mlp = Mlp([in_dim, *hidden, 4 * self.n_quats], activation=activation,
                      skips=tuple(s for s in skips if s < len(hidden)), rng=rng)
        if mlp.in_dim != in_dim or mlp.out_dim != 4 * self.n_quats:
            raise ValueError(
                f"decoder network is {mlp.in_dim}->{mlp.out_dim}, need {in_dim}->{4 * self.n_quats}"
            )
        self.mlp = mlp

    @property
    def params(self):
        return self.mlp.params

    def copy(self) -> "MlpDecoder":
        return MlpDecoder(self.n_quats, self.latent_dim, self.pe, mlp=self.mlp.copy())

    def inputs(self, z, times):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent has shape {z.shape}, decoder expects ({self.latent_dim},)")
        enc = self.pe(times)
        return np.concatenate([enc, np.broadcast_to(z, (len(enc), len(z)))], axis=1)

    def forward(self, z, times):
        X = self.inputs(z, times)
        raw, cache = self.mlp.forward(X)
        u = raw.reshape(len(X), self.n_quats, 4) + rot.IDENTITY
        return rot.normalize(u), (cache, u)

    def __call__(self, z, times):
        return self.forward(z, times)[0]

    def backward(self, cache, g_quats):
        """Returns ``(param_grads, z_grad)`` for upstream ``g_quats`` ``(n, n_quats, 4)``."""
        mlp_cache, u = cache
        g_u = rot.normalize_backward(u, np.asarray(g_quats, dtype=np.float64))
        grads, gX = self.mlp.backward(mlp_cache, g_u.reshape(len(u), -1))
        return grads, gX[:, self.pe.dim:].sum(axis=0)


def decode(dec: MlpDecoder, z, times):
    return dec(z, times)


def decoder_backward(dec: MlpDecoder, z, times, g_quats):
    _, cache = dec.forward(z, times)
    return dec.backward(cache, g_quats)


class GmpNet:
    """Regresses root velocity (m/s) from per-joint features.

    Per joint the features are the flattened world rotation (9), angular
    velocity (3), pelvis-centered position (3) and velocity (3).
    """

    FEATURES_PER_JOINT = 18

    def __init__(self, n_joints: int, hidden=(32,), activation="tanh", mlp: Mlp | None = None,
                 rng=None):
        self.n_joints = int(n_joints)
        in_dim = self.FEATURES_PER_JOINT * self.n_joints
        if mlp is None:
            mlp = Mlp([in_dim, *hidden, 3], activation=activation, rng=rng, init_scale=0.1)
        if mlp.in_dim != in_dim or mlp.out_dim != 3:
            raise ValueError(f"GMP network is {mlp.in_dim}->{mlp.out_dim}, need {in_dim}->3")
        self.mlp = mlp

    @property
    def params(self):
        return self.mlp.params

    def copy(self) -> "GmpNet":
        return GmpNet(self.n_joints, mlp=self.mlp.copy())

    def forward(self, features):
        return self.mlp.forward(features)

    def __call__(self, features):
        return self.mlp(features)

    def backward(self, cache, g_vel):
        return self.mlp.backward(cache, g_vel)


def gmp_forward(net: GmpNet, features):
    return net(features)


def gmp_backward(net: GmpNet, features, g_vel):
    _, cache = net.forward(features)
    return net.backward(cache, g_vel)


def anchor_quats(decoded, decoded_t0, init):
    """``init * decoded(t0)^-1 * decoded(t)`` per joint (quaternion form)."""
    return rot.mul(rot.mul(init, rot.conj(decoded_t0)), decoded)


def anchor_quats_backward(decoded, decoded_t0, init, g):
    A = rot.mul(init, rot.conj(decoded_t0))
    g_A, g_dec = rot.mul_backward(A, decoded, g)
    g_A = g_A.reshape((-1,) + A.shape).sum(axis=0) if g_A.ndim > A.ndim else g_A
    _, g_c = rot.mul_backward(init, rot.conj(decoded_t0), g_A)
    return g_dec, rot.conj(g_c)


def anchor_root(decoded_R, decoded_R0, init_R):
    """Matrix form: ``R_init @ R0^-1 @ R(t)`` for trajectories ``(..., 3, 3)``."""
    return init_R @ np.swapaxes(decoded_R0, -1, -2) @ decoded_R


def angular_velocity(quat_fn, t, h: float, domain=None):
    """Body-frame angular velocity by central differences of ``quat_fn``.

    ``omega = 2 log(q(t-h)^-1 q(t+h)) / (2h)`` using the log's vector part.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if domain is not None and (np.any(t - h < domain[0] - TIME_TOL) or np.any(t + h > domain[1] + TIME_TOL)):
        raise DomainError("t +- h outside the domain")
    q0 = quat_fn(t - h)
    q1 = quat_fn(t + h)
    return 2.0 * rot.log_vec(rot.mul(rot.conj(q0), q1)) / (2.0 * h)


def joint_velocity(pos_fn, t, h: float, domain=None):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if domain is not None and (np.any(t - h < domain[0] - TIME_TOL) or np.any(t + h > domain[1] + TIME_TOL)):
        raise DomainError("t +- h outside the domain")
    return (pos_fn(t + h) - pos_fn(t - h)) / (2.0 * h)


def integrate_root(tau0, velocities, dt: float) -> np.ndarray:
    """Forward Euler: returns ``tau`` at steps ``0..N`` (``N+1`` rows)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(v) + 1, 3))
    out[0] = tau0
    # sequential accumulation keeps the summation order fixed
    for n in range(len(v)):
        out[n + 1] = out[n] + v[n] * dt
    return out


def euler_weights(times, dt: float, n_steps: int) -> np.ndarray:
    """Matrix ``M`` with ``tau(t) = tau0 + M @ v`` for piecewise-linear Euler.

    ``tau(t) = tau_n + v_n (t - t_n)`` for ``t`` in step ``n``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    n = np.clip(np.floor(times / dt + 1e-9).astype(int), 0, n_steps - 1)
    cols = np.arange(n_steps)
    M = np.where(cols < n[:, None], dt, 0.0)
    rows = np.arange(len(times))
    M[rows, n] = times - n * dt
    return M


def slerp_baseline(pose0: Pose, pose1: Pose, t0: float, t1: float, times) -> Pose:
    """Per-joint slerp plus linear root translation between two keyframes."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times < t0 - TIME_TOL) or np.any(times > t1 + TIME_TOL):
        raise DomainError("query outside the keyframe interval")
    u = np.clip((times - t0) / (t1 - t0), 0.0, 1.0)
    local = rot.slerp(pose0.local[None], pose1.local[None], u[:, None])
    root = rot.slerp(pose0.root_rot[None], pose1.root_rot[None], u)
    tr = (1.0 - u)[:, None] * pose0.root_t + u[:, None] * pose1.root_t
    return Pose(local, root, tr)


@dataclass(frozen=True)
class LatentCode:
    z_l: np.ndarray
    z_g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_l", np.asarray(self.z_l, dtype=np.float64))
        object.__setattr__(self, "z_g", np.asarray(self.z_g, dtype=np.float64))
        if not (np.all(np.isfinite(self.z_l)) and np.all(np.isfinite(self.z_g))):
            raise ValueError("latent code must be finite")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_l, self.z_g])

    @classmethod
    def from_vector(cls, z, d_local: int) -> "LatentCode":
        z = np.asarray(z, dtype=np.float64)
        return cls(z[:d_local], z[d_local:])

    @classmethod
    def zeros(cls, d_local=32, d_global=8) -> "LatentCode":
        return cls(np.zeros(d_local), np.zeros(d_global))


class MotionField:
    """Pose at any ``t`` in ``[0, duration]`` from latent codes.

    The decoder emits quaternions for joints ``1..J-1`` followed by the root
    rotation.  These are anchored to the known initial pose; root
    translation comes from integrating GMP velocities on an ``n_steps``
    Euler grid.
    """

    def __init__(self, model: BodyModel, init: Pose, duration: float, decoder: MlpDecoder,
                 gmp: GmpNet, z, d_local: int, n_steps: int = 50):
        self.model = model
        self.init = init
        self.duration = float(duration)
        self.decoder = decoder
        self.gmp = gmp
        self.z = np.array(z, dtype=np.float64)
        self.d_local = int(d_local)
        self.n_steps = int(n_steps)
        if decoder.n_quats != model.n_joints:
            raise ValueError("decoder must emit one quaternion per joint")
        if gmp.n_joints != model.n_joints:
            raise ValueError("GMP joint count differs from the model")
        if abs(decoder.pe.span - self.duration) > 1e-12:
            raise ValueError("positional encoding span must equal the field duration")

    @classmethod
    def create(cls, model: BodyModel, init: Pose, duration: float, d_local=32, d_global=8,
               n_freqs=6, hidden=(128,) * 4, skips=(3,), gmp_hidden=(32,), n_steps=50, seed=0,
               activation="tanh") -> "MotionField":
        rng = np.random.default_rng(seed)
        pe = PositionalEncoding(n_freqs, duration)
        dec = MlpDecoder(model.n_joints, d_local + d_global, pe, hidden=hidden, skips=skips,
                         activation=activation, rng=rng)
        gmp = GmpNet(model.n_joints, hidden=gmp_hidden, rng=rng)
        return cls(model, init, duration, dec, gmp, np.zeros(d_local + d_global), d_local, n_steps)

    def copy(self) -> "MotionField":
        return MotionField(self.model, self.init, self.duration, self.decoder.copy(), self.gmp.copy(),
                           self.z.copy(), self.d_local, self.n_steps)

    @property
    def latent(self) -> LatentCode:
        return LatentCode.from_vector(self.z, self.d_local)

    @property
    def dt(self) -> float:
        return self.duration / self.n_steps

    def init_quats(self) -> np.ndarray:
        return np.concatenate([self.init.local[1:], self.init.root_rot[None]], axis=0)

    def decode_anchored(self, times):
        """Anchored quaternions ``(n, J, 4)`` plus what the reverse pass needs."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        allt = np.concatenate([times, [0.0]])
        q_all, cache = self.decoder.forward(self.z, allt)
        q_t, q_0 = q_all[:-1], q_all[-1]
        anchored = anchor_quats(q_t, q_0, self.init_quats())
        return anchored, (q_t, q_0, cache, allt)

    def _pose_from_quats(self, quats, root_t) -> Pose:
        n = len(quats)
        local = np.concatenate([np.broadcast_to(self.init.local[0], (n, 1, 4)), quats[:, :-1]], axis=1)
        return Pose(local, quats[:, -1], root_t)

    def local_poses(self, times) -> Pose:
        """Poses with the root pinned at the origin (pelvis-centered)."""
        q, _ = self.decode_anchored(times)
        return self._pose_from_quats(q, np.zeros((len(q), 3)))

    def gmp_grid_features(self):
        """Features at Euler grid times ``n * dt`` for ``n < n_steps``."""
        grid = np.arange(self.n_steps) * self.dt
        h = 0.5 * self.dt
        lo = np.clip(grid - h, 0.0, self.duration)
        hi = np.clip(grid + h, 0.0, self.duration)
        poses = self.local_poses(np.concatenate([grid, lo, hi]))
        fk = forward_kinematics(self.model, poses)
        n = self.n_steps
        R, P = fk.rotations, fk.positions
        Rrel = np.swapaxes(R[n:2 * n], -1, -2) @ R[2 * n:]
        span = (hi - lo)[:, None, None]
        omega = rotation_log(Rrel) / span
        vel = (P[2 * n:] - P[n:2 * n]) / span
        feats = np.concatenate([R[:n].reshape(n, -1, 9), omega, P[:n], vel], axis=-1)
        return feats.reshape(n, -1)

    def root_velocities(self):
        return self.gmp(self.gmp_grid_features())

    def root_translation(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        M = euler_weights(times, self.dt, self.n_steps)
        return self.init.root_t + M @ self.root_velocities()

    def poses(self, times) -> Pose:
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        q, _ = self.decode_anchored(times)
        return self._pose_from_quats(q, self.root_translation(times))

    def joints(self, times) -> np.ndarray:
        return forward_kinematics(self.model, self.poses(times)).positions


def rotation_log(R) -> np.ndarray:
    """Axis-angle vector of rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R, dtype=np.float64)
    c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    v = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], -1)
    s = np.linalg.norm(v, axis=-1)
    theta = np.arctan2(s, c)
    scale = np.where(s > 1e-12, theta / np.where(s > 1e-12, s, 1.0), 1.0)
    return v * scale[..., None]
