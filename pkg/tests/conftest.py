"""Shared fixtures: desk-scale trained models (cached across runs) and the
acceptance-criterion recorder printed in the terminal summary."""
import contextlib
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import nrdf
from nrdf.dataset import (
    SyntheticManifold,
    SyntheticManifoldConfig,
    build_fm_training_set,
    build_training_set,
    gen_synthetic_manifold,
)
from nrdf.netfield import ModelArchitecture, TrainConfig, load_model, model_init, save_model, train
from nrdf.sampling import DistanceSpec, SamplerConfig, perturb_poses, spawn_rngs

DESK = {
    "K": 5,
    "n_poses": 2000,
    "n_pairs": 20000,
    "sigma": np.pi / 4,
    "p": 2,
    "epochs": 300,
    "learning_rate": 1e-4,
    "seed": 0,
}

_RESULTS = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for an acceptance criterion, re-raising failures."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _RESULTS[number] = (title, "FAIL", f"{msg} ({time.perf_counter() - start:.1f}s)")
        raise
    _RESULTS[number] = (title, "PASS", f"{time.perf_counter() - start:.1f}s")


@pytest.fixture
def record_criterion():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title} [{detail}]")


def _source_digest():
    src = Path(nrdf.__file__).parent
    h = hashlib.sha256(json.dumps(DESK, sort_keys=True).encode())
    for name in ("manifold.py", "sampling.py", "dataset.py", "netfield.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


class DeskScale:
    """Synthetic dataset, held-out test starts and the two trained models."""

    def __init__(self, cache_dir):
        cfg = SyntheticManifoldConfig(K=DESK["K"], n_poses=DESK["n_poses"], seed=DESK["seed"])
        self.dataset = gen_synthetic_manifold(cfg)
        self.generator = SyntheticManifold(cfg)
        self.p = DESK["p"]
        self.sampler = SamplerConfig(DistanceSpec("halfgauss", (DESK["sigma"],)), p=self.p)
        self.cache_dir = Path(cache_dir)
        self.digest = _source_digest()
        self._models = {}

    def held_out_starts(self, n=200, seed=1234):
        """Perturbations of fresh manifold poses that are not in the dataset."""
        rng = np.random.default_rng(seed)
        clean = self.generator.poses_from_latent(self.generator.sample_latent(n, rng))
        starts, _ = perturb_poses(clean, self.sampler, rng)
        return clean, starts

    def model(self, mode):
        if mode in self._models:
            return self._models[mode]
        path = self.cache_dir / f"{mode}-{self.digest}.model"
        if path.exists():
            model = load_model(path)
        else:
            init_rng, data_rng, train_rng = spawn_rngs(DESK["seed"], 3)
            if mode == "nrdf":
                pairs = build_training_set(self.dataset, self.sampler, DESK["n_pairs"], data_rng)
            else:
                pairs = build_fm_training_set(self.dataset, DESK["n_pairs"], data_rng, self.p)
            cfg = TrainConfig(learning_rate=DESK["learning_rate"], epochs=DESK["epochs"], p=self.p,
                              mode=mode, seed=DESK["seed"])
            model = model_init(ModelArchitecture(K=DESK["K"]), init_rng)
            model, _ = train(model, self.dataset, pairs, cfg, train_rng)
            save_model(model, path)
        self._models[mode] = model
        return model


@pytest.fixture(scope="session")
def desk(request):
    return DeskScale(request.config.cache.mkdir("nrdf-desk-models"))
