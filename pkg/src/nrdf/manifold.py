"""Unit-quaternion Lie group primitives and the K-fold product manifold.

Conventions
-----------
- Quaternions are stored ``(w, x, y, z)``, scalar first, in arrays of
  shape ``(..., 4)``. Every function broadcasts over leading dimensions.
- A pose is an array of shape ``(..., K, 4)``.
- Tangent vectors live in the identity algebra: 4-vectors with a zero
  scalar part, applied by left translation ``Exp_q(eta) = q exp(eta)``.
- ``q`` and ``-q`` are the same rotation; every distance is sign invariant.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NearSingularTransport, StepTooLarge

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

RENORM_DRIFT = 1e-12
SMALL_ANGLE = 1e-6
SINGULAR_TRANSPORT = 1e-8


def _renormalize_drift(q):
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > RENORM_DRIFT):
        q = np.where(np.abs(norm - 1.0) > RENORM_DRIFT, q / norm, q)
    return q


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q):
    """Flip quaternions with a negative scalar part so that ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(q, r):
    """Hamilton product ``q r``."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(r, -1, 0)
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    return _renormalize_drift(out)


def _hamilton(q, r):
    # raw product for non-unit operands (tangent vectors)
    w1, x1, y1, z1 = np.moveaxis(q, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(r, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_exp(eta):
    """Exponential of a pure quaternion ``(0, v)``: ``(cos|v|, v sin|v|/|v|)``."""
    eta = np.asarray(eta, dtype=float)
    v = eta[..., 1:]
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    return np.concatenate([np.cos(theta), v * sinc], axis=-1)


def exp_map(q, eta):
    """Move from ``q`` along the geodesic with initial velocity ``eta``.

    Raises
    ------
    StepTooLarge
        If any ``|eta| >= pi``.
    """
    q = np.asarray(q, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(np.linalg.norm(eta[..., 1:], axis=-1) >= np.pi):
        raise StepTooLarge("tangent step norm must stay below pi")
    return quat_mul(q, quat_exp(eta))


def log_map(q, p):
    """Inverse of :func:`exp_map`, choosing the representative of ``p``
    closest to ``q`` so the result has norm at most pi/2."""
    rel = quat_mul(quat_conj(q), p)
    rel = canonicalize(rel)
    w = rel[..., :1]
    v = rel[..., 1:]
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = np.arctan2(vn, w)
    tiny = vn < 1e-300
    scale = np.where(tiny, 0.0, theta / np.where(tiny, 1.0, vn))
    return np.concatenate([np.zeros_like(w), v * scale], axis=-1)


def geodesic_dist(q1, q2):
    """Antipodal-aware geodesic distance ``arccos|w|`` with ``q1^-1 q2 = (w, v)``.

    Evaluated as ``2 atan2(min(|a-b|, |a+b|), max(|a-b|, |a+b|))``, which
    equals ``arccos|<a, b>|`` for unit 4-vectors but keeps full precision
    near 0 and pi/2. Range ``[0, pi/2]``.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dm = np.linalg.norm(q1 - q2, axis=-1)
    dp = np.linalg.norm(q1 + q2, axis=-1)
    return 2.0 * np.arctan2(np.minimum(dm, dp), np.maximum(dm, dp))


def egrad2rgrad(q, v):
    """Project an ambient gradient ``v`` at ``q`` onto the tangent space and
    rotate it into the tangent space at the identity.

    ``Pi_q(v) = Pv - (e^T Pv)/(1 + q_1) (q + e)`` with ``P = I - q q^T``.
    The rotation is the minimal 4D rotation taking ``q`` to ``e``; use
    :func:`transport_to_left_frame` before feeding the result to
    :func:`exp_map`.

    Raises
    ------
    NearSingularTransport
        If ``1 + q_1 < 1e-8``. Sign-canonical inputs never trigger this.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    denom = 1.0 + q[..., :1]
    if np.any(denom < SINGULAR_TRANSPORT):
        raise NearSingularTransport("transport undefined at q = -e; canonicalize first")
    u = v - q * np.sum(q * v, axis=-1, keepdims=True)
    out = u - (u[..., :1] / denom) * (q + IDENTITY)
    out[..., 0] = 0.0
    return out


def transport_to_left_frame(q, eta):
    """Re-express an identity-frame tangent produced by :func:`egrad2rgrad`
    in the left-translation frame used by :func:`exp_map` / :func:`log_map`.

    Undoes the minimal rotation (``e -> q``) and left-translates by ``q^-1``.
    """
    q = np.asarray(q, dtype=float)
    eta = np.asarray(eta, dtype=float)
    denom = 1.0 + q[..., :1]
    u = eta - (np.sum(q * eta, axis=-1, keepdims=True) / denom) * (q + IDENTITY)
    out = _hamilton(quat_conj(q), u)
    out[..., 0] = 0.0
    return out


def egrad2rgrad_left(q, v):
    """Riemannian gradient at ``q`` in the left-translation frame:
    ``q^-1 (P(q) v)``, with the scalar part zeroed."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return transport_to_left_frame(q, egrad2rgrad(q, v))


def left_to_ambient(q, eta):
    """Map an identity-frame tangent to the ambient tangent vector ``q eta``."""
    return _hamilton(np.asarray(q, dtype=float), np.asarray(eta, dtype=float))


# ---------------------------------------------------------------------------
# product manifold


def _check_pair(a, b):
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionMismatch(f"pose shapes differ: {a.shape[-2:]} vs {b.shape[-2:]}")


def _as_pose(a):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != 4:
        raise DimensionMismatch(f"expected pose of shape (..., K, 4), got {a.shape}")
    return a


def combine_joint_distances(d, p=1):
    """L_p norm over the trailing joint axis of per-joint distances."""
    if p == 1:
        return np.sum(d, axis=-1)
    if p == 2:
        return np.sqrt(np.sum(d * d, axis=-1))
    raise ValueError(f"product metric order must be 1 or 2, got {p}")


def pose_dist(a, b, p=1):
    """Product-manifold distance: L_p norm of per-joint geodesic distances."""
    a, b = _as_pose(a), _as_pose(b)
    _check_pair(a, b)
    return combine_joint_distances(geodesic_dist(a, b), p)


def pose_exp(a, t):
    a, t = _as_pose(a), _as_pose(t)
    _check_pair(a, t)
    return exp_map(a, t)


def pose_log(a, b):
    a, b = _as_pose(a), _as_pose(b)
    _check_pair(a, b)
    return log_map(a, b)


def tangent_norm(t):
    """Global 2-norm of a pose tangent over all joints."""
    t = np.asarray(t, dtype=float)
    return np.sqrt(np.sum(t * t, axis=(-2, -1)))


def geodesic_interp(a, b, t):
    """Per-joint geodesic interpolation ``Exp_a(t Log_a(b))``."""
    a, b = _as_pose(a), _as_pose(b)
    _check_pair(a, b)
    t = np.asarray(t, dtype=float)
    if t.ndim:
        t = t[..., None, None]
    return exp_map(a, t * log_map(a, b))


def random_quaternion(rng, size=()):
    """Uniform random unit quaternions (Haar measure on SO(3) lifted to S^3)."""
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    q = rng.standard_normal(shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion, shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )
