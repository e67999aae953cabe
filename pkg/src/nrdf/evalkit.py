"""Forward kinematics on a synthetic skeleton, evaluation metrics, realized
distance histograms, inverse kinematics with a distance-field prior, and
diverse pose generation."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import manifold as mf
from .dataset import nn_exact_batch
from .errors import DimensionMismatch, EmptyDataset, TooFewPoses
from .projection import (
    CompositeObjective,
    ProjectionConfig,
    project_batch,
    riemannian_descent,
)
from .sampling import perturb_poses, sample_ambient_gaussian

CM = 100.0
IK_THRESHOLD = 0.03
DQ_WEIGHT = 0.5


# ---------------------------------------------------------------------------
# skeleton and forward kinematics


@dataclass
class Skeleton:
    """Kinematic tree. ``bone_offsets[j]`` is joint ``j``'s rest offset from
    its parent, expressed in the parent's frame; the root offset is ignored."""

    parents: list
    bone_offsets: np.ndarray

    def __post_init__(self):
        self.parents = [None if p is None or p < 0 else int(p) for p in self.parents]
        self.bone_offsets = np.asarray(self.bone_offsets, dtype=float)
        K = len(self.parents)
        if K == 0 or self.parents[0] is not None:
            raise ValueError("joint 0 must be the root")
        if self.bone_offsets.shape != (K, 3):
            raise ValueError(f"bone_offsets must have shape ({K}, 3)")
        for j, p in enumerate(self.parents[1:], start=1):
            if p is None or not 0 <= p < j:
                raise ValueError(f"joint {j} needs a parent with a smaller index")
        if K > 1 and np.any(np.linalg.norm(self.bone_offsets[1:], axis=1) <= 0):
            raise ValueError("bone lengths must be positive")

    @property
    def K(self):
        return len(self.parents)


def chain_skeleton(K, bone_length=0.25, direction=(1.0, 0.0, 0.0)):
    """Serial chain with equal bones along ``direction`` at rest."""
    d = np.asarray(direction, dtype=float)
    offsets = np.tile(bone_length * d / np.linalg.norm(d), (K, 1))
    offsets[0] = 0.0
    return Skeleton([None] + list(range(K - 1)), offsets)


def forward_kinematics(skel, pose):
    """Joint positions in meters, shape ``(..., K, 3)``; the root sits at the origin."""
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-2:] != (skel.K, 4):
        raise DimensionMismatch(f"pose shape {pose.shape[-2:]} does not match K={skel.K}")
    local = mf.quat_to_matrix(mf.normalize(pose))
    lead = pose.shape[:-2]
    rot = np.empty(lead + (skel.K, 3, 3))
    pos = np.zeros(lead + (skel.K, 3))
    rot[..., 0, :, :] = local[..., 0, :, :]
    for j in range(1, skel.K):
        p = skel.parents[j]
        rot[..., j, :, :] = rot[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + rot[..., p, :, :] @ skel.bone_offsets[j]
    return pos


def _global_rotations(skel, pose):
    pose = mf.normalize(pose)
    out = np.array(pose, copy=True)
    for j in range(1, skel.K):
        out[..., j, :] = mf.quat_mul(out[..., skel.parents[j], :], pose[..., j, :])
    return out


# ---------------------------------------------------------------------------
# metrics


def metric_dnn(pose, dataset, p=1):
    """Geodesic distance from ``pose`` (or a batch) to its nearest dataset pose."""
    pose = np.asarray(pose, dtype=float)
    single = pose.ndim == 2
    _, dist = nn_exact_batch(pose[None] if single else pose, dataset, p)
    return float(dist[0]) if single else dist


def metric_apd(poses, skel):
    """Average pairwise distance in cm: mean per-joint FK position distance
    over all unordered pairs."""
    poses = np.asarray(poses, dtype=float)
    if len(poses) < 2:
        raise TooFewPoses("APD needs at least two poses")
    pos = forward_kinematics(skel, poses)
    i, j = np.triu_indices(len(poses), k=1)
    per = np.linalg.norm(pos[i] - pos[j], axis=-1).mean(axis=-1)
    return float(per.mean() * CM)


def _check_same_k(a, b):
    if np.shape(a)[-2:] != np.shape(b)[-2:]:
        raise DimensionMismatch(f"pose shapes {np.shape(a)} and {np.shape(b)} differ")


def metric_m2m(a, b, skel):
    """Mean joint position error in cm. Joints stand in for surface markers."""
    _check_same_k(a, b)
    d = np.linalg.norm(forward_kinematics(skel, a) - forward_kinematics(skel, b), axis=-1)
    return d.mean(axis=-1) * CM if d.ndim > 1 else float(d.mean() * CM)


def metric_global_rotation(a, b, skel):
    """Mean geodesic distance between root-composed joint rotations (rad)."""
    _check_same_k(a, b)
    d = mf.geodesic_dist(_global_rotations(skel, a), _global_rotations(skel, b))
    return d.mean(axis=-1) if d.ndim > 1 else float(d.mean())


def metric_dq_m2m(a, b, skel):
    """``m2m (cm) + 0.5 * global rotation error (rad)``; mixed units by design."""
    return metric_m2m(a, b, skel) + DQ_WEIGHT * metric_global_rotation(a, b, skel)


def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2):
    """Fréchet distance between two Gaussians.

    The trace of ``(S1 S2)^{1/2}`` is computed as the trace of the symmetric
    ``(S1^{1/2} S2 S1^{1/2})^{1/2}``, which has the same eigenvalues.
    """
    r1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(r1 @ cov2 @ r1)
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))


def _features(poses):
    poses = np.asarray(poses, dtype=float)
    return mf.canonicalize(poses).reshape(len(poses), -1)


def metric_fid(gen, ref):
    """Fréchet distance between Gaussians fitted to sign-canonical flat poses."""
    x, y = _features(gen), _features(ref)
    dim = x.shape[1]
    if y.shape[1] != dim:
        raise DimensionMismatch("pose sets have different K")
    if min(len(x), len(y)) < dim + 1:
        raise TooFewPoses(f"FID needs at least {dim + 1} poses per set")
    return max(
        frechet_distance(x.mean(0), np.cov(x, rowvar=False), y.mean(0), np.cov(y, rowvar=False)),
        0.0,
    )


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])

    @property
    def mode(self):
        return int(np.argmax(self.counts))


def hist_realized_distances(samples, dataset, p=1, n_bins=50, upper=None):
    """Histogram of exact NN distances of ``samples`` over ``[0, upper]``
    (default: the largest observed distance)."""
    _, d = nn_exact_batch(np.asarray(samples, dtype=float), dataset, p)
    hi = float(d.max()) if upper is None else float(upper)
    if hi <= 0:
        hi = 1.0
    counts, edges = np.histogram(np.clip(d, 0.0, hi), bins=n_bins, range=(0.0, hi))
    return Histogram(edges, counts)


@dataclass
class MetricReport:
    """Summary of a pose set. Units: d_NN and rotations in rad, APD and m2m in cm.

    ``m2m`` and ``dq_m2m`` compare each pose with its reference (or, without
    references, with its nearest dataset pose). Entries that cannot be
    computed for the given set size are ``None``.
    """

    n: int
    d_nn_mean: float
    d_nn_median: float
    d_nn_min: float
    d_nn_max: float
    apd: float | None = None
    m2m: float | None = None
    dq_m2m: float | None = None
    fid: float | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.to_dict().items():
                w.writerow([k, "" if v is None else format(v, ".17g")])


def compute_report(poses, dataset, skel, references=None, p=1):
    poses = np.asarray(poses, dtype=float)
    if len(poses) == 0:
        raise TooFewPoses("cannot report on an empty pose set")
    idx, d = nn_exact_batch(poses, dataset, p)
    refs = dataset.poses[idx] if references is None else np.asarray(references, dtype=float)
    report = MetricReport(
        n=len(poses),
        d_nn_mean=float(d.mean()),
        d_nn_median=float(np.median(d)),
        d_nn_min=float(d.min()),
        d_nn_max=float(d.max()),
        m2m=float(np.mean(metric_m2m(poses, refs, skel))),
        dq_m2m=float(np.mean(metric_dq_m2m(poses, refs, skel))),
    )
    if len(poses) >= 2:
        report.apd = metric_apd(poses, skel)
    try:
        report.fid = metric_fid(poses, dataset.poses)
    except TooFewPoses:
        pass
    return report


# ---------------------------------------------------------------------------
# inverse kinematics


@dataclass
class IKProblem:
    skeleton: Skeleton
    observed_joints: list
    observed_positions: np.ndarray
    prior: object = None
    lambda_pose: float = 5.0

    def __post_init__(self):
        self.observed_joints = [int(j) for j in self.observed_joints]
        self.observed_positions = np.asarray(self.observed_positions, dtype=float)
        if len(set(self.observed_joints)) != len(self.observed_joints):
            raise ValueError("observed joint indices must be distinct")
        if any(not 0 <= j < self.skeleton.K for j in self.observed_joints):
            raise ValueError("observed joint index out of range")
        if self.observed_positions.shape != (len(self.observed_joints), 3):
            raise DimensionMismatch("one 3-vector per observed joint expected")

    def joint_error(self, pose):
        """Mean Euclidean error over observed joints (meters)."""
        pos = forward_kinematics(self.skeleton, pose)[..., self.observed_joints, :]
        return np.linalg.norm(pos - self.observed_positions, axis=-1).mean(axis=-1)


class DataTerm:
    """``sum_j |FK(pose)_j - obs_j|`` with a finite-difference ambient gradient.

    The gradient is taken by central differences over the 3K tangent
    coordinates at each pose and mapped back to the ambient space.
    """

    def __init__(self, problem, fd_step=1e-5):
        self.problem = problem
        self.fd_step = fd_step

    def value(self, poses):
        pr = self.problem
        pos = forward_kinematics(pr.skeleton, poses)[..., pr.observed_joints, :]
        return np.linalg.norm(pos - pr.observed_positions, axis=-1).sum(axis=-1)

    def evaluate(self, poses):
        poses = np.asarray(poses, dtype=float)
        single = poses.ndim == 2
        x = poses[None] if single else poses
        B, K = x.shape[:2]
        basis = np.zeros((3 * K, K, 4))
        for j in range(K):
            for a in range(3):
                basis[3 * j + a, j, 1 + a] = self.fd_step
        plus = mf.pose_exp(x[:, None], basis[None])
        minus = mf.pose_exp(x[:, None], -basis[None])
        coeff = (self.value(plus) - self.value(minus)) / (2.0 * self.fd_step)
        eta = np.zeros((B, K, 4))
        eta[..., 1:] = coeff.reshape(B, K, 3)
        grad = mf.left_to_ambient(mf.normalize(x), eta)
        value = self.value(x)
        if single:
            return float(value[0]), grad[0]
        return value, grad


@dataclass
class IKConfig:
    step: float = 0.1
    shrink: float = 0.7
    max_iters: int = 500
    threshold: float = IK_THRESHOLD
    warmup_iters: int = 10
    fd_step: float = 1e-5


def ik_solve(problem, init, cfg=None):
    """Minimize ``L_data + lambda_pose * prior`` by Riemannian descent.

    Stops once the mean observed-joint error drops below ``cfg.threshold``.
    An optional prior-only warm-up runs first. Returns ``(pose, diagnostics)``.

    Raises
    ------
    MaxItersExceeded
        With the best-so-far :class:`~nrdf.projection.DescentResult`.
    """
    cfg = cfg or IKConfig()
    data = DataTerm(problem, cfg.fd_step)
    terms = [(1.0, data)]
    use_prior = problem.prior is not None and problem.lambda_pose > 0
    if use_prior:
        terms.append((problem.lambda_pose, problem.prior))
    objective = CompositeObjective(terms)
    warmup = problem.prior if use_prior and cfg.warmup_iters > 0 else None
    result = riemannian_descent(
        objective,
        init,
        cfg.step,
        ProjectionConfig(max_iters=cfg.max_iters),
        warmup=warmup,
        warmup_iters=cfg.warmup_iters,
        stop=lambda pose: problem.joint_error(pose) < cfg.threshold,
        shrink=cfg.shrink,
    )
    diag = {
        "iterations": result.iterations,
        "joint_error": float(problem.joint_error(result.pose)),
        "prior_value": float(problem.prior.evaluate(result.pose)[0]) if use_prior else None,
    }
    return result.pose, diag


# ---------------------------------------------------------------------------
# generation


def generate_diverse(model, dataset, n, sampler_cfg, proj_cfg, rng, source="perturb"):
    """Draw ``n`` initial poses and project each onto the model's zero level set.

    ``source="perturb"`` perturbs random dataset poses with ``sampler_cfg``;
    ``source="gaussian"`` starts from normalized ambient Gaussian samples.
    Projections that hit ``max_iters`` keep their last iterate.
    """
    if n == 0:
        return []
    if len(dataset) == 0:
        raise EmptyDataset("generation needs a dataset")
    if source == "perturb":
        seeds = rng.integers(0, len(dataset), n)
        starts, _ = perturb_poses(dataset.poses[seeds], sampler_cfg, rng)
    elif source == "gaussian":
        starts = sample_ambient_gaussian(dataset.K, rng, n)
    else:
        raise ValueError(f"unknown source {source!r}")
    out, _, _, _ = project_batch(model, starts, proj_cfg)
    return list(out)

