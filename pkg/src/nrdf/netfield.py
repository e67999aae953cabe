"""Neural distance field over poses, written directly in numpy.

The network is a hierarchical per-joint encoder (each joint sees its own
quaternion and its parent's feature, root to leaf) followed by an MLP
decoder with a softplus head, so outputs are always nonnegative. Forward,
reverse-mode gradients (parameters and inputs), Adam and the two-stage
training schedule are implemented here without an autodiff framework.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import label_with_nn
from .errors import ArchitectureMismatch, DimensionMismatch, DivergedTraining, MalformedCheckpoint
from .sampling import sample_ambient_gaussian

CHECKPOINT_VERSION = 1
_VERSION_LINE = re.compile(r"^NRDF-MODEL v(\d+)$")


def chain_parents(K):
    return (-1,) + tuple(range(K - 1))


@dataclass(frozen=True)
class ModelArchitecture:
    K: int
    parents: tuple = None
    per_joint_feature_dim: int = 16
    decoder_hidden: tuple = (256, 256, 256)
    hierarchical: bool = True
    leak: float = 0.01

    def __post_init__(self):
        parents = chain_parents(self.K) if self.parents is None else tuple(int(p) for p in self.parents)
        if len(parents) != self.K or parents[0] != -1:
            raise ValueError("parents must have length K with parents[0] = -1")
        if any(not 0 <= p < j for j, p in enumerate(parents) if j):
            raise ValueError("every parent index must precede its child")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))

    @property
    def decoder_input(self):
        return self.K * self.per_joint_feature_dim if self.hierarchical else 4 * self.K

    def param_shapes(self):
        """Ordered ``name -> shape`` of every parameter tensor."""
        shapes = {}
        F = self.per_joint_feature_dim
        if self.hierarchical:
            for j in range(self.K):
                shapes[f"enc{j}.W"] = (4 + F, F)
                shapes[f"enc{j}.b"] = (F,)
        widths = (self.decoder_input,) + self.decoder_hidden + (1,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"dec{i}.W"] = (a, b)
            shapes[f"dec{i}.b"] = (b,)
        return shapes

    @property
    def n_decoder_layers(self):
        return len(self.decoder_hidden) + 1

    def to_dict(self):
        d = asdict(self)
        d["parents"] = list(self.parents)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


def _leaky(x, a):
    return np.where(x > 0, x, a * x)


def _leaky_grad(x, a):
    return np.where(x > 0, 1.0, a)


class DistanceFieldModel:
    """``f(pose) >= 0``; parameters live in ``self.params`` (name -> array)."""

    def __init__(self, arch, params):
        self.arch = arch
        self.params = params

    # -- evaluation ---------------------------------------------------------

    def _prepare(self, poses):
        poses = np.asarray(poses, dtype=float)
        single = poses.ndim == 2
        if single:
            poses = poses[None]
        if poses.ndim != 3 or poses.shape[1:] != (self.arch.K, 4):
            raise DimensionMismatch(
                f"model expects poses of shape (K={self.arch.K}, 4), got {poses.shape[-2:]}"
            )
        sign = np.where(poses[..., :1] < 0.0, -1.0, 1.0)
        return poses * sign, sign, single

    def _forward(self, X):
        arch, P, a = self.arch, self.params, self.arch.leak
        B = X.shape[0]
        cache = {"X": X}
        if arch.hierarchical:
            F = arch.per_joint_feature_dim
            feats, enc_in, enc_pre = [], [], []
            for j, parent in enumerate(arch.parents):
                pf = np.zeros((B, F)) if parent < 0 else feats[parent]
                inp = np.concatenate([X[:, j], pf], axis=1)
                pre = inp @ P[f"enc{j}.W"] + P[f"enc{j}.b"]
                enc_in.append(inp)
                enc_pre.append(pre)
                feats.append(_leaky(pre, a))
            h = np.concatenate(feats, axis=1)
            cache["enc_in"], cache["enc_pre"] = enc_in, enc_pre
        else:
            h = X.reshape(B, -1)
        acts, pres = [h], []
        L = arch.n_decoder_layers
        for i in range(L):
            z = acts[-1] @ P[f"dec{i}.W"] + P[f"dec{i}.b"]
            pres.append(z)
            if i < L - 1:
                acts.append(_leaky(z, a))
        cache["acts"], cache["pres"] = acts, pres
        z = pres[-1][:, 0]
        return np.logaddexp(0.0, z), cache

    def _backward(self, cache, dvalue, want_params=True, want_input=False):
        """Backpropagate ``dL/df`` (shape ``(B,)``) through the network."""
        arch, P, a = self.arch, self.params, self.arch.leak
        grads = {}
        acts, pres = cache["acts"], cache["pres"]
        L = arch.n_decoder_layers
        dz = (dvalue * expit(pres[-1][:, 0]))[:, None]
        for i in reversed(range(L)):
            if i < L - 1:
                dz = dz * _leaky_grad(pres[i], a)
            if want_params:
                grads[f"dec{i}.W"] = acts[i].T @ dz
                grads[f"dec{i}.b"] = dz.sum(axis=0)
            dz = dz @ P[f"dec{i}.W"].T
        dh = dz
        X = cache["X"]
        if not arch.hierarchical:
            return grads, dh.reshape(X.shape) if want_input else None
        F = arch.per_joint_feature_dim
        dfeat = [dh[:, j * F : (j + 1) * F].copy() for j in range(arch.K)]
        dX = np.zeros_like(X) if want_input else None
        for j in reversed(range(arch.K)):
            dpre = dfeat[j] * _leaky_grad(cache["enc_pre"][j], a)
            if want_params:
                grads[f"enc{j}.W"] = cache["enc_in"][j].T @ dpre
                grads[f"enc{j}.b"] = dpre.sum(axis=0)
            dinp = dpre @ P[f"enc{j}.W"].T
            if want_input:
                dX[:, j] = dinp[:, :4]
            parent = arch.parents[j]
            if parent >= 0:
                dfeat[parent] += dinp[:, 4:]
        return grads, dX

    def __call__(self, poses):
        return forward(self, poses)

    def evaluate(self, poses):
        """``(values, ambient gradients)``; accepts one pose or a batch."""
        X, sign, single = self._prepare(poses)
        f, cache = self._forward(X)
        _, dX = self._backward(cache, np.ones_like(f), want_params=False, want_input=True)
        dX = dX * sign
        if single:
            return float(f[0]), dX[0]
        return f, dX

    def copy(self):
        return DistanceFieldModel(self.arch, {k: v.copy() for k, v in self.params.items()})


def model_init(arch, rng):
    """Fan-in scaled uniform weights, zero biases."""
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".W"):
            bound = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, shape)
        else:
            params[name] = np.zeros(shape)
    return DistanceFieldModel(arch, params)


def forward(model, poses):
    """Distance predicted for one pose (float) or a batch ``(B, K, 4)``."""
    X, _, single = model._prepare(poses)
    f, _ = model._forward(X)
    return float(f[0]) if single else f


def input_gradient(model, pose):
    """Exact ``df/d(ambient coordinates)``, same shape as ``pose``."""
    return model.evaluate(pose)[1]


def loss_and_param_grad(model, queries, targets, loss="l1"):
    """Mean absolute (or squared) error and its gradient for every parameter."""
    X, _, _ = model._prepare(queries)
    targets = np.asarray(targets, dtype=float)
    f, cache = model._forward(X)
    r = f - targets
    n = len(r)
    if loss == "l1":
        value = float(np.mean(np.abs(r)))
        dvalue = np.sign(r) / n
    elif loss == "l2":
        value = float(np.mean(r * r))
        dvalue = 2.0 * r / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads, _ = model._backward(cache, dvalue)
    return value, grads


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 40
    # fraction of epochs spent fine-tuning on ambient Gaussian poses
    stage2_frac: float = 0.25
    loss: str = "l1"
    p: int = 1
    seed: int = 0
    # "fmdis" trains on the given pairs only: no clean poses, no NN labels
    mode: str = "nrdf"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.stage2_frac <= 1.0:
            raise ValueError("stage2_frac must be in [0, 1]")
        if self.mode not in ("nrdf", "fmdis"):
            raise ValueError(f"unknown training mode {self.mode!r}")


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train(model, dataset, pairs, cfg, rng, log=None):
    """Two-stage training; returns ``(model, [(epoch, stage, mean_loss), ...])``.

    Stage 1 batches are half noisy pairs, half clean dataset poses with
    target 0. Stage 2 adds ambient Gaussian poses labelled with their exact
    nearest-neighbour distance: half of each batch, the rest as in stage 1.
    In ``fmdis`` mode every batch is drawn from ``pairs`` alone.
    """
    opt = Adam(model.params, lr=cfg.learning_rate)
    n_stage2 = 0 if cfg.mode == "fmdis" else int(round(cfg.stage2_frac * cfg.epochs))
    n_stage1 = cfg.epochs - n_stage2
    half = cfg.batch_size // 2
    curve = []
    gauss = None

    def run_batch(queries, targets):
        loss, grads = loss_and_param_grad(model, queries, targets, cfg.loss)
        if not np.isfinite(loss):
            raise DivergedTraining(f"non-finite loss at epoch {epoch}")
        opt.step(model.params, grads)
        return loss

    for epoch in range(cfg.epochs):
        stage = "stage1" if epoch < n_stage1 else "stage2"
        losses = []
        if cfg.mode == "fmdis":
            for b in _batches(len(pairs), cfg.batch_size, rng):
                losses.append(run_batch(pairs.queries[b], pairs.distance[b]))
        elif stage == "stage1":
            for b in _batches(len(pairs), half, rng):
                clean = dataset.poses[rng.integers(0, len(dataset), len(b))]
                q = np.concatenate([pairs.queries[b], clean])
                t = np.concatenate([pairs.distance[b], np.zeros(len(b))])
                losses.append(run_batch(q, t))
        else:
            if gauss is None:
                g = sample_ambient_gaussian(dataset.K, rng, len(pairs))
                gauss = label_with_nn(g, dataset, cfg.p)
            quarter = max(1, half // 2)
            for b in _batches(len(gauss), half, rng):
                nb = rng.integers(0, len(pairs), quarter)
                clean = dataset.poses[rng.integers(0, len(dataset), quarter)]
                q = np.concatenate([gauss.queries[b], pairs.queries[nb], clean])
                t = np.concatenate([gauss.distance[b], pairs.distance[nb], np.zeros(quarter)])
                losses.append(run_batch(q, t))
        mean = float(np.mean(losses))
        curve.append((epoch, stage, mean))
        if log is not None:
            log(epoch, stage, mean)
    return model, curve


def save_loss_curve(curve, path):
    lines = ["epoch,stage,mean_loss"]
    lines.extend(f"{e},{s},{format(v, '.17g')}" for e, s, v in curve)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path):
    lines = [f"NRDF-MODEL v{CHECKPOINT_VERSION}", "arch " + json.dumps(model.arch.to_dict(), sort_keys=True)]
    for name, shape in model.arch.param_shapes().items():
        arr = model.params[name]
        lines.append(f"param {name} {' '.join(str(s) for s in arr.shape)}")
        lines.append(" ".join(format(v, ".17g") for v in arr.reshape(-1)))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path, expected_arch=None):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise MalformedCheckpoint(f"{path}: empty checkpoint")
    m = _VERSION_LINE.match(lines[0].strip())
    if m is None:
        raise MalformedCheckpoint(f"{path}: not a model checkpoint")
    if int(m.group(1)) != CHECKPOINT_VERSION:
        raise MalformedCheckpoint(f"{path}: unsupported checkpoint version v{m.group(1)}")
    if len(lines) < 2 or not lines[1].startswith("arch "):
        raise MalformedCheckpoint(f"{path}: missing architecture header")
    try:
        arch = ModelArchitecture(**json.loads(lines[1][5:]))
    except (ValueError, TypeError) as exc:
        raise MalformedCheckpoint(f"{path}: bad architecture header: {exc}") from None
    if expected_arch is not None and arch != expected_arch:
        raise ArchitectureMismatch(f"{path}: checkpoint architecture differs from the expected one")
    shapes = arch.param_shapes()
    params = {}
    i = 2
    while i < len(lines) and lines[i].strip() != "end":
        head = lines[i].split()
        if len(head) < 2 or head[0] != "param" or i + 1 >= len(lines):
            raise MalformedCheckpoint(f"{path}:{i + 1}: expected a param record")
        name = head[1]
        try:
            shape = tuple(int(s) for s in head[2:])
            values = np.array([float(v) for v in lines[i + 1].split()])
        except ValueError as exc:
            raise MalformedCheckpoint(f"{path}:{i + 1}: {exc}") from None
        if name not in shapes:
            raise ArchitectureMismatch(f"{path}: unexpected parameter {name}")
        if shape != shapes[name]:
            raise ArchitectureMismatch(f"{path}: {name} has shape {shape}, architecture needs {shapes[name]}")
        if values.size != int(np.prod(shape)):
            raise MalformedCheckpoint(f"{path}: {name} holds {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
        i += 2
    if i >= len(lines):
        raise MalformedCheckpoint(f"{path}: truncated checkpoint")
    missing = set(shapes) - set(params)
    if missing:
        raise MalformedCheckpoint(f"{path}: missing parameters {sorted(missing)}")
    return DistanceFieldModel(arch, {k: params[k] for k in shapes})
