"""Training-pose samplers.

The main sampler draws a distance ``h`` from a chosen distribution and an
independent uniform direction in the tangent space of a seed pose, then
steps ``h`` along that direction with the exponential map, so the realized
geodesic (L2 product) distance to the seed is exactly ``h``. The Euclidean
noise sampler used by Pose-NDF and the ambient Gaussian sampler used for
fine-tuning are provided for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import manifold as mf
from .errors import GuardExhausted

MAX_REDRAWS = 100

_KINDS = {
    "halfgauss": "half-gaussian",
    "half-gaussian": "half-gaussian",
    "exp": "exponential",
    "exponential": "exponential",
    "uniform": "uniform",
    "dirac": "dirac",
}


@dataclass(frozen=True)
class DistanceSpec:
    """Distribution of geodesic distances (radians).

    ``params`` holds ``(sigma,)`` for half-gaussian, ``(rate,)`` for
    exponential, ``(lo, hi)`` for uniform and ``(h,)`` for dirac.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        kind = _KINDS.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown distance distribution {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        expected = 2 if kind == "uniform" else 1
        if len(params) != expected:
            raise ValueError(f"{kind} takes {expected} parameter(s), got {len(params)}")
        if kind == "dirac":
            if params[0] < 0:
                raise ValueError("dirac location must be >= 0")
        elif kind == "uniform":
            lo, hi = params
            if not 0 <= lo < hi:
                raise ValueError("uniform bounds must satisfy 0 <= lo < hi")
        elif params[0] <= 0:
            raise ValueError(f"{kind} parameter must be > 0")

    @classmethod
    def parse(cls, text):
        """Parse ``"halfgauss:0.785"``, ``"exp:8"``, ``"uniform:0,1"``, ``"dirac:0.3"``."""
        kind, _, rest = text.partition(":")
        if not rest:
            raise ValueError(f"missing parameters in {text!r}")
        return cls(kind, tuple(float(x) for x in rest.split(",")))

    def scipy_dist(self):
        """Frozen :mod:`scipy.stats` distribution for goodness-of-fit checks."""
        from scipy import stats

        if self.kind == "half-gaussian":
            return stats.halfnorm(scale=self.params[0])
        if self.kind == "exponential":
            return stats.expon(scale=1.0 / self.params[0])
        if self.kind == "uniform":
            lo, hi = self.params
            return stats.uniform(loc=lo, scale=hi - lo)
        raise ValueError("dirac has no continuous counterpart")

    def __str__(self):
        short = {"half-gaussian": "halfgauss", "exponential": "exp"}.get(self.kind, self.kind)
        return f"{short}:{','.join(repr(p) for p in self.params)}"


@dataclass(frozen=True)
class SamplerConfig:
    distance_spec: DistanceSpec
    p: int = 1
    seed: int = 0
    max_per_joint_step: float = np.pi / 2 - 1e-3

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("metric order must be 1 or 2")


def make_rng(seed):
    return np.random.default_rng(seed)


def spawn_rngs(seed, n):
    """Independent child generators from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_distance(spec, rng, size=None):
    kind, params = spec.kind, spec.params
    if kind == "dirac":
        return np.full(size, params[0]) if size is not None else params[0]
    if kind == "half-gaussian":
        return np.abs(rng.normal(0.0, params[0], size))
    if kind == "exponential":
        return rng.exponential(1.0 / params[0], size)
    return rng.uniform(params[0], params[1], size)


def sample_tangent_directions(n, K, rng):
    """``n`` uniform unit directions in the ``3K``-dimensional pose tangent space."""
    v = rng.standard_normal((n, K, 3))
    norm = np.sqrt(np.sum(v * v, axis=(1, 2)))
    bad = norm < 1e-12
    while np.any(bad):
        v[bad] = rng.standard_normal((int(bad.sum()), K, 3))
        norm = np.sqrt(np.sum(v * v, axis=(1, 2)))
        bad = norm < 1e-12
    v /= norm[:, None, None]
    return np.concatenate([np.zeros((n, K, 1)), v], axis=-1)


def sample_tangent_direction(pose, rng):
    pose = np.asarray(pose, dtype=float)
    return sample_tangent_directions(1, pose.shape[-2], rng)[0]


def perturb_poses(poses, cfg, rng):
    """Batch version of :func:`perturb_pose` for poses of shape ``(n, K, 4)``.

    Rows whose per-joint step would exceed ``cfg.max_per_joint_step`` get
    both ``h`` and the direction redrawn, at most ``MAX_REDRAWS`` times.
    """
    poses = np.asarray(poses, dtype=float)
    n, K = poses.shape[0], poses.shape[1]
    h = np.asarray(sample_distance(cfg.distance_spec, rng, n), dtype=float)
    v = sample_tangent_directions(n, K, rng)

    def violating(h, v):
        step = h[:, None] * np.linalg.norm(v[..., 1:], axis=-1)
        return np.any(step > cfg.max_per_joint_step, axis=1)

    bad = violating(h, v)
    redraws = 0
    while np.any(bad):
        if redraws == MAX_REDRAWS:
            raise GuardExhausted(
                f"{int(bad.sum())} sample(s) still exceed the per-joint step guard "
                f"after {MAX_REDRAWS} redraws"
            )
        m = int(bad.sum())
        h[bad] = sample_distance(cfg.distance_spec, rng, m)
        v[bad] = sample_tangent_directions(m, K, rng)
        bad = violating(h, v)
        redraws += 1
    return mf.exp_map(poses, h[:, None, None] * v), h


def perturb_pose(pose, cfg, rng):
    """Return ``(Exp_pose(h v), h)`` with ``h ~ P`` and ``v`` uniform on the
    unit tangent sphere."""
    out, h = perturb_poses(np.asarray(pose, dtype=float)[None], cfg, rng)
    return out[0], float(h[0])


def sample_posendf_style(pose, sigma, rng):
    """Add isotropic ambient noise to every coordinate and renormalize each joint."""
    pose = np.asarray(pose, dtype=float)
    noisy = pose + rng.normal(0.0, sigma, pose.shape)
    return noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)


def sample_ambient_gaussian(K, rng, n=None):
    shape = (K, 4) if n is None else (n, K, 4)
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_fm_pairs(clean, rng, p=1):
    """Flow-matching style pairs for a batch of clean poses ``(n, K, 4)``.

    Returns ``(pose_t, t, target)`` where ``pose_t`` lies on the geodesic from
    an ambient Gaussian noise pose (``t = 0``) to the clean pose (``t = 1``)
    and ``target`` is its distance to that clean pose, with no nearest
    neighbour recomputation.
    """
    clean = np.asarray(clean, dtype=float)
    n, K = clean.shape[0], clean.shape[1]
    noise = sample_ambient_gaussian(K, rng, n)
    t = rng.uniform(0.0, 1.0, n)
    pose_t = mf.geodesic_interp(noise, clean, t)
    return pose_t, t, mf.pose_dist(pose_t, clean, p)


def sample_fm_pair(clean, rng, p=1):
    pose_t, t, target = sample_fm_pairs(np.asarray(clean, dtype=float)[None], rng, p)
    return pose_t[0], float(t[0]), float(target[0])
