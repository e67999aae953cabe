"""Projection onto the zero level set of a distance field.

A *field* is any object with ``evaluate(poses) -> (values, ambient_grads)``
accepting one pose ``(K, 4)`` or a batch ``(B, K, 4)``; the trained
:class:`~nrdf.netfield.DistanceFieldModel` and :class:`OracleField` both
qualify.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .errors import MaxItersExceeded, VanishingGradient

VANISHING = 1e-10


@dataclass
class ProjectionConfig:
    alpha: float = 1.0
    max_iters: int = 200
    convergence_tol: float = 1e-5
    record_trajectory: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be > 0")


@dataclass
class ProjectionResult:
    pose: np.ndarray
    iterations: int
    value: float
    trajectory: list = field(default_factory=list)


class OracleField:
    """Exact distance to a single target pose, with its analytic gradient.

    The field is extended off the manifold as ``d(q / |q|, target)`` so its
    ambient gradient is purely tangential.
    """

    def __init__(self, target, p=2):
        self.target = np.asarray(target, dtype=float)
        self.p = p

    def evaluate(self, poses):
        poses = np.asarray(poses, dtype=float)
        single = poses.ndim == 2
        x = poses[None] if single else poses
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        q = x / norm
        d = mf.geodesic_dist(q, self.target)
        value = mf.combine_joint_distances(d, self.p)
        c = np.sum(q * self.target, axis=-1, keepdims=True)
        s = np.where(c < 0, -1.0, 1.0)
        # tangential part of the closer target representative has norm sin d
        u = s * self.target - np.abs(c) * q
        sin_d = np.sin(d)[..., None]
        # below 1e-12 rad the direction is rounding noise; treat as stationary
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(d[..., None] > 1e-12, -u / sin_d, 0.0)
        if self.p == 2:
            with np.errstate(invalid="ignore", divide="ignore"):
                w = np.where(value[:, None] > 0, d / value[:, None], 0.0)
            g = g * w[..., None]
        g = g / norm
        if single:
            return float(value[0]), g[0]
        return value, g


def riemannian_grads(field, poses):
    """Batch version of :func:`riemannian_grad`; returns ``(values, grads, norms)``
    with unnormalized left-frame gradients and no vanishing check."""
    poses = mf.canonicalize(poses)
    values, egrad = field.evaluate(poses)
    grad = mf.transport_to_left_frame(poses, mf.egrad2rgrad(poses, egrad))
    return values, grad, mf.tangent_norm(grad)


def riemannian_grad(field, pose):
    """Value, unit Riemannian gradient direction (identity-frame tangent per
    joint) and the raw gradient norm at ``pose``.

    Raises
    ------
    VanishingGradient
        If the raw norm is below 1e-10.
    """
    values, grad, norm = riemannian_grads(field, np.asarray(pose, dtype=float)[None])
    if norm[0] < VANISHING:
        raise VanishingGradient(f"gradient norm {norm[0]:.3g} at a stationary pose")
    return float(values[0]), grad[0] / norm[0], float(norm[0])


def rdfgrad_step(pose, value, direction, alpha=1.0):
    """``Exp_pose(-alpha * value * direction)``."""
    return mf.pose_exp(pose, -alpha * value * np.asarray(direction, dtype=float))


def _record(traj, it, value, norm, pose):
    traj.append((it, float(value), float(norm), np.array(pose, copy=True)))


def project(field, pose0, cfg=None):
    """Iterate RDFGrad steps until the predicted distance stops changing.

    Raises
    ------
    MaxItersExceeded
        Carrying the lowest-valued iterate, when ``max_iters`` is reached.
    """
    cfg = cfg or ProjectionConfig()
    pose = mf.canonicalize(pose0)
    traj = []
    values, grad, norm = riemannian_grads(field, pose[None])
    f, g, n = float(values[0]), grad[0], float(norm[0])
    if cfg.record_trajectory:
        _record(traj, 0, f, n, pose)
    if f < cfg.convergence_tol or n < VANISHING:
        return ProjectionResult(pose, 0, f, traj)
    best = (f, pose)
    for it in range(1, cfg.max_iters + 1):
        pose = mf.canonicalize(rdfgrad_step(pose, f, g / n, cfg.alpha))
        values, grad, norm = riemannian_grads(field, pose[None])
        f_new, g, n = float(values[0]), grad[0], float(norm[0])
        if cfg.record_trajectory:
            _record(traj, it, f_new, n, pose)
        if f_new < best[0]:
            best = (f_new, pose)
        if abs(f - f_new) < cfg.convergence_tol or n < VANISHING:
            return ProjectionResult(pose, it, f_new, traj)
        f = f_new
    raise MaxItersExceeded(
        f"no convergence within {cfg.max_iters} iterations",
        best=ProjectionResult(best[1], cfg.max_iters, best[0], traj),
        iterations=cfg.max_iters,
    )


def project_batch(field, poses, cfg=None):
    """Vectorized :func:`project` over ``(B, K, 4)`` starts.

    Returns ``(poses, iterations, values, converged)``; rows that hit
    ``max_iters`` report ``converged = False`` instead of raising.
    """
    cfg = cfg or ProjectionConfig()
    poses = mf.canonicalize(poses).copy()
    B = len(poses)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    f, grad, norm = riemannian_grads(field, poses)
    f = np.array(f, dtype=float)
    done = (f < cfg.convergence_tol) | (norm < VANISHING)
    converged |= done
    active = ~done
    for it in range(1, cfg.max_iters + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        step = -cfg.alpha * f[idx, None, None] * grad[idx] / norm[idx, None, None]
        poses[idx] = mf.canonicalize(mf.pose_exp(poses[idx], step))
        f_new, g_new, n_new = riemannian_grads(field, poses[idx])
        iters[idx] = it
        stop = (np.abs(f[idx] - f_new) < cfg.convergence_tol) | (n_new < VANISHING)
        f[idx], grad[idx], norm[idx] = f_new, g_new, n_new
        converged[idx[stop]] = True
        active[idx[stop]] = False
    return poses, iters, f, converged


def project_euclidean_baseline(field, pose0, lr, cfg=None):
    """Projected Euclidean gradient descent: ambient step, then per-joint
    renormalization. Same stopping rule as :func:`project`."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    poses, iters, values, converged = euclidean_baseline_batch(
        field, np.asarray(pose0, dtype=float)[None], lr, cfg
    )
    result = ProjectionResult(poses[0], int(iters[0]), float(values[0]))
    if not converged[0]:
        raise MaxItersExceeded("no convergence", best=result, iterations=int(iters[0]))
    return result


def euclidean_baseline_batch(field, poses, lr, cfg=None):
    cfg = cfg or ProjectionConfig()
    poses = np.array(poses, dtype=float)
    B = len(poses)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    f, g = field.evaluate(poses)
    f = np.array(f, dtype=float)
    active = f >= cfg.convergence_tol
    converged[~active] = True
    for it in range(1, cfg.max_iters + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        x = poses[idx] - lr * g[idx]
        poses[idx] = x / np.linalg.norm(x, axis=-1, keepdims=True)
        f_new, g_new = field.evaluate(poses[idx])
        iters[idx] = it
        stop = np.abs(f[idx] - f_new) < cfg.convergence_tol
        f[idx], g[idx] = f_new, g_new
        converged[idx[stop]] = True
        active[idx[stop]] = False
    return poses, iters, f, converged


# ---------------------------------------------------------------------------
# composite objectives


class CompositeObjective:
    """Weighted sum of fields: ``sum_i w_i f_i``."""

    def __init__(self, terms):
        self.terms = [(float(w), f) for w, f in terms]

    def evaluate(self, poses):
        total_v, total_g = 0.0, 0.0
        for w, f in self.terms:
            if w == 0.0:
                continue
            v, g = f.evaluate(poses)
            total_v = total_v + w * np.asarray(v)
            total_g = total_g + w * np.asarray(g)
        if np.isscalar(total_g) or np.ndim(total_g) == 0:
            poses = np.asarray(poses, dtype=float)
            total_g = np.zeros_like(poses)
            total_v = 0.0 if poses.ndim == 2 else np.zeros(len(poses))
        if np.ndim(total_v) == 0:
            total_v = float(total_v)
        return total_v, total_g


@dataclass
class DescentResult:
    pose: np.ndarray
    iterations: int
    value: float


def riemannian_descent(objective, pose0, step, cfg=None, warmup=None, warmup_iters=0,
                       stop=None, max_joint_step=np.pi / 4, shrink=1.0):
    """Riemannian gradient descent ``Exp(-step * grad)``.

    ``warmup`` (another objective) is minimized alone for ``warmup_iters``
    iterations first. ``stop(pose)`` may end the main phase early. Per-joint
    steps longer than ``max_joint_step`` are shortened to it. With
    ``shrink < 1`` the step is multiplied by ``shrink`` after every
    main-phase iteration that increases the objective.

    Raises
    ------
    MaxItersExceeded
        With the lowest-objective iterate when neither the tolerance nor
        ``stop`` is met within ``cfg.max_iters`` main-phase iterations.
    """
    cfg = cfg or ProjectionConfig()
    pose = mf.canonicalize(pose0)

    def take_step(obj, pose, step):
        values, grad, norm = riemannian_grads(obj, pose[None])
        t = -step * grad[0]
        jn = np.linalg.norm(t[:, 1:], axis=-1, keepdims=True)
        t = np.where(jn > max_joint_step, t * (max_joint_step / np.maximum(jn, 1e-300)), t)
        return float(values[0]), float(norm[0]), mf.canonicalize(mf.pose_exp(pose, t))

    for _ in range(warmup_iters if warmup is not None else 0):
        _, n, new = take_step(warmup, pose, step)
        if n < VANISHING:
            break
        pose = new

    if stop is not None and stop(pose):
        return DescentResult(pose, 0, float(objective.evaluate(pose)[0]))
    value = float(objective.evaluate(pose)[0])
    best = DescentResult(pose, 0, value)
    for it in range(1, cfg.max_iters + 1):
        _, n, new = take_step(objective, pose, step)
        if n < VANISHING:
            return DescentResult(pose, it - 1, value)
        pose = new
        new_value = float(objective.evaluate(pose)[0])
        if new_value < best.value:
            best = DescentResult(pose, it, new_value)
        if stop is not None and stop(pose):
            return DescentResult(pose, it, new_value)
        if stop is None and abs(value - new_value) < cfg.convergence_tol:
            return DescentResult(pose, it, new_value)
        if new_value > value:
            step *= shrink
        value = new_value
    raise MaxItersExceeded(f"no convergence within {cfg.max_iters} iterations", best=best,
                           iterations=cfg.max_iters)


def save_trajectory(trajectory, path):
    """CSV ``iter,f_value,grad_norm,<4K pose coordinates>``."""
    if not trajectory:
        raise ValueError("empty trajectory")
    K = trajectory[0][3].shape[0]
    cols = [f"q{j}_{c}" for j in range(K) for c in "wxyz"]
    lines = [",".join(["iter", "f_value", "grad_norm"] + cols)]
    for it, f, n, pose in trajectory:
        vals = [str(it), format(f, ".17g"), format(n, ".17g")]
        vals.extend(format(v, ".17g") for v in pose.reshape(-1))
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
