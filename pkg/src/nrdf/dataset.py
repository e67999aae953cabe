"""Pose datasets: persistence, a synthetic pose manifold, nearest-neighbour
search and offline construction of (noisy pose, NN distance) training pairs."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import manifold as mf
from .errors import DimensionMismatch, EmptyDataset, MalformedFile, NonUnitQuaternion
from .sampling import perturb_poses

POSES_MAGIC = "NRDF-POSES v1"
PAIRS_MAGIC = "NRDF-PAIRS v1"
_POSES_HEADER = re.compile(r"^NRDF-POSES v1 K=(\d+) N=(\d+)$")
_PAIRS_HEADER = re.compile(r"^NRDF-PAIRS v1 K=(\d+)$")

NORM_TOLERANCE = 1e-3
# exact distances are recomputed for every candidate within this margin of
# the approximate minimum; the approximation error is below 1e-7 rad
_NN_MARGIN = 1e-6


class PoseDataset:
    """Immutable collection of sign-canonical poses, stored as ``(N, K, 4)``."""

    def __init__(self, poses, K=None):
        poses = np.asarray(poses, dtype=float)
        if poses.size == 0:
            if K is None:
                raise ValueError("K is required for an empty dataset")
            poses = poses.reshape(0, K, 4)
        if poses.ndim != 3 or poses.shape[-1] != 4:
            raise DimensionMismatch(f"expected poses of shape (N, K, 4), got {poses.shape}")
        if K is not None and poses.shape[1] != K:
            raise DimensionMismatch(f"dataset has K={poses.shape[1]}, expected {K}")
        poses = mf.canonicalize(poses)
        poses.setflags(write=False)
        self.poses = poses
        self.K = poses.shape[1]
        flat = poses.reshape(len(poses), 4 * self.K).copy()
        flat.setflags(write=False)
        self.flat = flat

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __repr__(self):
        return f"PoseDataset(N={len(self)}, K={self.K})"


@dataclass
class TrainingPairs:
    """Column-oriented training pairs: query poses, NN index and distance."""

    queries: np.ndarray
    nn_index: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.distance)

    @property
    def K(self):
        return self.queries.shape[1]


# ---------------------------------------------------------------------------
# persistence


def _fmt_row(values):
    return " ".join(format(v, ".17g") for v in values)


def save_poses(dataset, path):
    path = Path(path)
    lines = [f"{POSES_MAGIC} K={dataset.K} N={len(dataset)}"]
    lines.extend(_fmt_row(row) for row in dataset.flat)
    path.write_text("\n".join(lines) + "\n")


def _parse_quaternions(rows, K, path):
    poses = np.asarray(rows, dtype=float).reshape(len(rows), K, 4)
    norms = np.linalg.norm(poses, axis=-1)
    bad = np.abs(norms - 1.0) > NORM_TOLERANCE
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise NonUnitQuaternion(
            f"{path}: pose {i} joint {j} has norm {norms[i, j]:.6g}"
        )
    return poses / norms[..., None]


def load_poses(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    m = _POSES_HEADER.match(lines[0].strip())
    if m is None:
        raise MalformedFile(f"{path}: bad header {lines[0]!r}")
    K, N = int(m.group(1)), int(m.group(2))
    if K < 1:
        raise MalformedFile(f"{path}: K must be >= 1")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != N:
        raise MalformedFile(f"{path}: header says N={N}, found {len(body)} rows")
    rows = []
    for lineno, ln in enumerate(body, start=2):
        fields = ln.split()
        if len(fields) != 4 * K:
            raise MalformedFile(f"{path}:{lineno}: expected {4 * K} fields, got {len(fields)}")
        try:
            rows.append([float(x) for x in fields])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
    if not rows:
        return PoseDataset(np.zeros((0, K, 4)), K=K)
    return PoseDataset(_parse_quaternions(rows, K, path))


def save_pairs(pairs, path):
    path = Path(path)
    K = pairs.K
    flat = pairs.queries.reshape(len(pairs), -1)
    lines = [f"{PAIRS_MAGIC} K={K}"]
    for row, idx, dist in zip(flat, pairs.nn_index, pairs.distance):
        lines.append(f"{_fmt_row(row)} {int(idx)} {format(float(dist), '.17g')}")
    path.write_text("\n".join(lines) + "\n")


def load_pairs(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    m = _PAIRS_HEADER.match(lines[0].strip())
    if m is None:
        raise MalformedFile(f"{path}: bad header {lines[0]!r}")
    K = int(m.group(1))
    rows, idx, dist = [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        fields = ln.split()
        if not fields:
            continue
        if len(fields) != 4 * K + 2:
            raise MalformedFile(f"{path}:{lineno}: expected {4 * K + 2} fields, got {len(fields)}")
        try:
            rows.append([float(x) for x in fields[: 4 * K]])
            idx.append(int(fields[4 * K]))
            dist.append(float(fields[4 * K + 1]))
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
    if not rows:
        return TrainingPairs(np.zeros((0, K, 4)), np.zeros(0, dtype=int), np.zeros(0))
    queries = _parse_quaternions(rows, K, path)
    return TrainingPairs(queries, np.asarray(idx, dtype=int), np.asarray(dist))


# ---------------------------------------------------------------------------
# synthetic manifold


@dataclass(frozen=True)
class SyntheticManifoldConfig:
    K: int = 5
    latent_dim: int = 2
    n_poses: int = 1000
    seed: int = 0
    amplitude: float = 0.8
    n_terms: int = 3
    max_frequency: float = 2.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= self.latent_dim < 3 * self.K:
            raise ValueError("latent_dim must be in [1, 3K)")
        if not 1 <= self.n_terms <= 3:
            raise ValueError("n_terms must be in [1, 3]")
        if self.n_poses < 0:
            raise ValueError("n_poses must be >= 0")


class SyntheticManifold:
    """Smooth ``latent_dim``-dimensional family of poses.

    Joint ``j`` rotates about a fixed random axis by
    ``amplitude * sum_m c_jm sin(w_jm . z + b_jm)`` with ``sum_m |c_jm| = 1``,
    for latent codes ``z`` in the unit cube.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
        K, L, M = cfg.K, cfg.latent_dim, cfg.n_terms
        axes = rng.standard_normal((K, 3))
        self.axes = axes / np.linalg.norm(axes, axis=-1, keepdims=True)
        coef = rng.uniform(0.5, 1.0, (K, M)) * rng.choice([-1.0, 1.0], (K, M))
        self.coef = coef / np.sum(np.abs(coef), axis=1, keepdims=True)
        self.freq = rng.uniform(-cfg.max_frequency, cfg.max_frequency, (K, M, L))
        self.phase = rng.uniform(0.0, 2 * np.pi, (K, M))

    def angles(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        arg = np.einsum("kml,nl->nkm", self.freq, z) + self.phase
        return self.cfg.amplitude * np.einsum("nkm,km->nk", np.sin(arg), self.coef)

    def poses_from_latent(self, z):
        """Poses ``(n, K, 4)`` for latent codes ``(n, latent_dim)``."""
        return mf.axis_angle_to_quat(self.axes, self.angles(z))

    def sample_latent(self, n, rng):
        return rng.uniform(0.0, 1.0, (n, self.cfg.latent_dim))


def gen_synthetic_manifold(cfg):
    gen = SyntheticManifold(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    z = gen.sample_latent(cfg.n_poses, rng)
    return PoseDataset(gen.poses_from_latent(z), K=cfg.K)


# ---------------------------------------------------------------------------
# nearest neighbours


def _check_query(queries, dataset):
    if len(dataset) == 0:
        raise EmptyDataset("nearest-neighbour search on an empty dataset")
    if queries.shape[-2:] != (dataset.K, 4):
        raise DimensionMismatch(
            f"query shape {queries.shape[-2:]} does not match dataset K={dataset.K}"
        )


def _approx_dist(queries, dataset, p):
    # per-joint distance from |<a, b>| via the chord length; cheap but loses
    # precision near 0, so only used to shortlist candidates
    c = np.abs(np.einsum("bkc,nkc->bnk", queries, dataset.poses))
    chord = np.sqrt(np.maximum(2.0 - 2.0 * c, 0.0))
    d = 2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0))
    return mf.combine_joint_distances(d, p)


def nn_exact_batch(queries, dataset, p=1, chunk=64):
    """Exact nearest neighbour of every query; ties go to the lowest index.

    Returns ``(indices, distances)`` arrays.
    """
    queries = np.asarray(queries, dtype=float)
    _check_query(queries, dataset)
    n = len(queries)
    idx = np.empty(n, dtype=int)
    dist = np.empty(n)
    for start in range(0, n, chunk):
        q = queries[start : start + chunk]
        approx = _approx_dist(q, dataset, p)
        lo = approx.min(axis=1, keepdims=True)
        for r, row in enumerate(approx <= lo + _NN_MARGIN * (1.0 + dataset.K)):
            cand = np.flatnonzero(row)
            exact = mf.pose_dist(dataset.poses[cand], q[r], p)
            best = int(np.argmin(exact))
            idx[start + r] = cand[best]
            dist[start + r] = exact[best]
    return idx, dist


def nn_exact(query, dataset, p=1):
    """Brute-force geodesic nearest neighbour: ``(index, distance)``."""
    query = np.asarray(query, dtype=float)
    idx, dist = nn_exact_batch(query[None], dataset, p)
    return int(idx[0]), float(dist[0])


def nn_two_stage(query, dataset, k_prime=100, k=1, p=1):
    """Shortlist ``k_prime`` candidates by Euclidean distance between
    sign-canonical flat vectors, then re-rank them by geodesic distance.

    Returns a list of ``(index, distance)`` pairs, closest first.
    """
    query = np.asarray(query, dtype=float)
    _check_query(query[None], dataset)
    N = len(dataset)
    if not 1 <= k <= k_prime <= N:
        raise ValueError(f"need 1 <= k <= k_prime <= N, got k={k} k_prime={k_prime} N={N}")
    flat = mf.canonicalize(query).reshape(-1)
    eucl = np.sum((dataset.flat - flat) ** 2, axis=1)
    if k_prime < N:
        cand = np.sort(np.argpartition(eucl, k_prime - 1)[:k_prime])
    else:
        cand = np.arange(N)
    exact = mf.pose_dist(dataset.poses[cand], query, p)
    order = np.lexsort((cand, exact))[:k]
    return [(int(cand[i]), float(exact[i])) for i in order]


def build_training_set(dataset, sampler_cfg, n_pairs, rng):
    """Perturb random dataset poses and label each with its exact NN distance."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot build training pairs from an empty dataset")
    seeds = rng.integers(0, len(dataset), n_pairs)
    queries, _ = perturb_poses(dataset.poses[seeds], sampler_cfg, rng)
    idx, dist = nn_exact_batch(queries, dataset, sampler_cfg.p)
    return TrainingPairs(queries, idx, dist)


def label_with_nn(queries, dataset, p=1):
    """Wrap arbitrary query poses as training pairs labelled by exact NN."""
    queries = np.asarray(queries, dtype=float)
    idx, dist = nn_exact_batch(queries, dataset, p)
    return TrainingPairs(queries, idx, dist)


def build_fm_training_set(dataset, n_pairs, rng, p=1):
    """Flow-matching style pairs: points on geodesics from Gaussian noise to
    random dataset poses, labelled by the distance to that pose (no NN search)."""
    from .sampling import sample_fm_pairs

    if len(dataset) == 0:
        raise EmptyDataset("cannot build training pairs from an empty dataset")
    seeds = rng.integers(0, len(dataset), n_pairs)
    pose_t, _, target = sample_fm_pairs(dataset.poses[seeds], rng, p)
    return TrainingPairs(pose_t, seeds, target)
