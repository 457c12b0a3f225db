"""Quaternion and rotation-matrix utilities.

Quaternions are ``(..., 4)`` arrays in ``(w, x, y, z)`` order.  Functions
broadcast over leading dimensions.
"""
from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-9
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def canonicalize(q):
    """Flip sign so that ``w >= 0`` (q and -q are the same rotation)."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q[..., :1] < 0, -q, q)


def normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def unit_quaternion(q, tol: float = UNIT_TOL):
    """Validate a unit quaternion and return it canonicalized (``w >= 0``)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError("quaternion must have 4 components")
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError(f"non-unit quaternion (norm {n.ravel()[np.argmax(np.abs(n - 1).ravel())]!r})")
    return canonicalize(q / n[..., None])


def conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def mul(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def left_matrix(a):
    """Matrix ``L(a)`` with ``mul(a, b) == L(a) @ b``."""
    w, x, y, z = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def right_matrix(b):
    """Matrix ``R(b)`` with ``mul(a, b) == R(b) @ a``."""
    w, x, y, z = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], -2)


def mul_backward(a, b, g):
    """Gradients of ``mul(a, b)`` w.r.t. ``a`` and ``b`` given upstream ``g``."""
    ga = np.einsum("...ji,...j->...i", right_matrix(b), g)
    gb = np.einsum("...ji,...j->...i", left_matrix(a), g)
    return ga, gb


def to_matrix(q):
    """Rotation matrix of a unit quaternion, shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def to_matrix_backward(q, gR):
    """Gradient of ``to_matrix`` (as a polynomial in q) given upstream ``gR``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = gR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def from_matrix(R):
    """Unit quaternion (``w >= 0``) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = np.trace(m)
        k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[n] = q
    return canonicalize(normalize(out)).reshape(R.shape[:-2] + (4,))


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rotate(q, v):
    """Rotate vectors ``v`` by quaternions ``q``."""
    return np.einsum("...ij,...j->...i", to_matrix(q), v)


def log_vec(q):
    """Vector part of the quaternion logarithm: ``axis * angle / 2``.

    The sign of ``q`` is chosen so the result corresponds to the shortest
    rotation (angle in ``[0, pi]``).
    """
    q = canonicalize(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    half = np.arctan2(s, q[..., 0])
    # half/s -> 1 as s -> 0
    scale = np.where(s > 1e-12, half / np.where(s > 1e-12, s, 1.0), 1.0)
    return v * scale[..., None]


def angle(q):
    """Rotation angle in ``[0, pi]`` of unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def angle_between(q0, q1):
    return angle(mul(conj(q0), q1))


def slerp(q0, q1, u):
    """Shortest-arc spherical interpolation at constant angular velocity.

    ``q1`` is negated when ``dot(q0, q1) < 0``.  When the two inputs are
    (numerically) the same rotation the result is normalized linear
    interpolation; at ``dot == 0`` (a relative turn of exactly pi) the
    formula is regular and the arc through ``q1`` as given is taken.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1)
    q1 = np.where((dot < 0)[..., None], -q1, q1)
    # angle between the 4-vectors, accurate for nearby inputs too
    theta = 2.0 * np.arctan2(np.linalg.norm(q0 - q1, axis=-1), np.linalg.norm(q0 + q1, axis=-1))
    sin_t = np.sin(theta)
    near = sin_t < 1e-12
    safe = np.where(near, 1.0, sin_t)
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / safe)
    w1 = np.where(near, u, np.sin(u * theta) / safe)
    out = w0[..., None] * q0 + w1[..., None] * q1
    out = normalize(out)
    # exact endpoints
    out = np.where((u == 0)[..., None], q0, out)
    out = np.where((u == 1)[..., None], q1, out)
    return out


def geodesic(R1, R2):
    """``||log(R1 R2^T)||_F`` which equals ``sqrt(2)`` times the relative angle."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    M = R1 @ np.swapaxes(R2, -1, -2)
    c = 0.5 * (np.trace(M, axis1=-2, axis2=-1) - 1.0)
    skew = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                     M[..., 1, 0] - M[..., 0, 1]], -1)
    s = 0.5 * np.linalg.norm(skew, axis=-1)
    return np.sqrt(2.0) * np.arctan2(s, c)


def quat_geodesic(q1, q2):
    """Geodesic distance between the rotations of two quaternions."""
    return np.sqrt(2.0) * angle_between(q1, q2)


def quat_geodesic_backward(q, q_ref, g):
    """Gradient of ``quat_geodesic(q, q_ref)`` w.r.t. ``q`` (unit ``q``).

    The distance is a cone at ``q == q_ref``; there the zero subgradient is
    returned.
    """
    rel = mul(conj(q_ref), q)
    w = rel[..., 0]
    v = rel[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    sgn = np.where(w < 0, -1.0, 1.0)
    aw = np.abs(w)
    den = s * s + aw * aw
    ok = s > 1e-15
    s_safe = np.where(ok, s, 1.0)
    # d/d(s, |w|) of 2*atan2(s, |w|) = 2*(|w|, -s)/den
    coef = 2.0 * np.sqrt(2.0) * g / den
    g_rel_v = np.where(ok[..., None], (coef * aw / s_safe)[..., None] * v, 0.0)
    g_rel_w = np.where(ok, -coef * s * sgn, 0.0)
    g_rel = np.concatenate([g_rel_w[..., None], g_rel_v], -1)
    _, gq = mul_backward(conj(q_ref), q, g_rel)
    return gq


def normalize_backward(u, g):
    """Gradient through ``u / ||u||`` given upstream ``g`` on the output."""
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    q = u / n
    return (g - q * np.sum(q * g, axis=-1, keepdims=True)) / n
