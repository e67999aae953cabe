import numpy as np
import pytest

from nrdf import manifold as mf
from nrdf.dataset import SyntheticManifoldConfig, gen_synthetic_manifold
from nrdf.errors import ArchitectureMismatch, DimensionMismatch, MalformedCheckpoint
from nrdf.netfield import (
    ModelArchitecture,
    TrainConfig,
    forward,
    input_gradient,
    load_model,
    loss_and_param_grad,
    model_init,
    save_loss_curve,
    save_model,
    train,
)

FD_STEP = 1e-5


def tiny(K=3, hierarchical=True, seed=0):
    arch = ModelArchitecture(K=K, per_joint_feature_dim=4, decoder_hidden=(8, 8),
                             hierarchical=hierarchical)
    return model_init(arch, np.random.default_rng(seed))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("hierarchical", [True, False])
def test_param_gradient_matches_finite_differences(hierarchical):
    rng = np.random.default_rng(1)
    worst = 0.0
    for draw in range(10):
        model = tiny(hierarchical=hierarchical, seed=draw)
        q = mf.random_quaternion(rng, (6, 3))
        t = rng.uniform(0, 1, 6)
        _, grads = loss_and_param_grad(model, q, t, loss="l2")
        for name, g in grads.items():
            fd = np.zeros_like(g)
            p = model.params[name]
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + FD_STEP
                up, _ = loss_and_param_grad(model, q, t, loss="l2")
                p[idx] = old - FD_STEP
                down, _ = loss_and_param_grad(model, q, t, loss="l2")
                p[idx] = old
                fd[idx] = (up - down) / (2 * FD_STEP)
            worst = max(worst, rel_err(g, fd))
    assert worst < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for draw in range(100):
        model = tiny(seed=draw)
        pose = mf.random_quaternion(rng, (3,))
        g = input_gradient(model, pose)
        fd = np.zeros_like(pose)
        for idx in np.ndindex(pose.shape):
            e = np.zeros_like(pose)
            e[idx] = FD_STEP
            fd[idx] = (forward(model, pose + e) - forward(model, pose - e)) / (2 * FD_STEP)
        assert rel_err(g, fd) < 1e-4


def test_input_gradient_sign_convention():
    # f is even in each joint's sign; its gradient flips with the sign
    model = tiny()
    pose = mf.random_quaternion(np.random.default_rng(3), (3,))
    flipped = pose.copy()
    flipped[1] *= -1
    assert forward(model, flipped) == forward(model, pose)
    g, gf = input_gradient(model, pose), input_gradient(model, flipped)
    np.testing.assert_array_equal(gf[1], -g[1])
    np.testing.assert_array_equal(gf[0], g[0])


def test_zero_final_layer_is_constant_ln2():
    model = tiny()
    last = model.arch.n_decoder_layers - 1
    model.params[f"dec{last}.W"][:] = 0
    model.params[f"dec{last}.b"][:] = 0
    q = mf.random_quaternion(np.random.default_rng(4), (20, 3))
    np.testing.assert_allclose(forward(model, q), np.log(2.0), rtol=0, atol=1e-15)
    assert np.all(input_gradient(model, q[0]) == 0)


def test_linear_model_gradient_is_weight_vector():
    arch = ModelArchitecture(K=2, decoder_hidden=(), hierarchical=False)
    model = model_init(arch, np.random.default_rng(5))
    w = model.params["dec0.W"][:, 0]
    # scale the weights down so softplus' slope at the pose is the only factor
    pose = mf.canonicalize(mf.random_quaternion(np.random.default_rng(6), (2,)))
    z = float(pose.reshape(-1) @ w + model.params["dec0.b"][0])
    slope = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(input_gradient(model, pose).reshape(-1), slope * w, rtol=1e-12)
    assert forward(model, pose) == pytest.approx(np.log1p(np.exp(z)), rel=1e-12)


def test_clamped_model_has_zero_loss_and_gradient():
    model = tiny()
    last = model.arch.n_decoder_layers - 1
    model.params[f"dec{last}.W"][:] = 0
    model.params[f"dec{last}.b"][:] = -800.0  # softplus underflows to exactly 0
    q = mf.random_quaternion(np.random.default_rng(7), (16, 3))
    loss, grads = loss_and_param_grad(model, q, np.zeros(16))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("loss", ["l1", "l2"])
def test_duplicated_batch_same_loss(loss):
    model = tiny()
    rng = np.random.default_rng(8)
    q, t = mf.random_quaternion(rng, (10, 3)), rng.uniform(0, 1, 10)
    a, ga = loss_and_param_grad(model, q, t, loss)
    b, gb = loss_and_param_grad(model, np.concatenate([q, q]), np.concatenate([t, t]), loss)
    assert a == pytest.approx(b, rel=1e-14)
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], rtol=1e-10, atol=1e-15)


def test_init_deterministic_and_nonnegative():
    a, b = tiny(seed=11), tiny(seed=11)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    q = mf.random_quaternion(np.random.default_rng(9), (10_000, 3))
    f = forward(a, q)
    assert np.all(np.isfinite(f)) and np.all(f >= 0)
    np.testing.assert_array_equal(f, forward(a, q))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(tiny(), np.tile(mf.IDENTITY, (4, 1)))


def test_overfit_ten_pairs():
    rng = np.random.default_rng(10)
    arch = ModelArchitecture(K=3, per_joint_feature_dim=8, decoder_hidden=(32, 32))
    model = model_init(arch, rng)
    q = mf.random_quaternion(rng, (10, 3))
    t = rng.uniform(0.1, 1.0, 10)
    from nrdf.netfield import Adam

    opt = Adam(model.params, lr=3e-3)
    for _ in range(2000):
        _, g = loss_and_param_grad(model, q, t, "l2")
        opt.step(model.params, g)
    assert np.mean(np.abs(forward(model, q) - t)) < 1e-3


def test_train_small_run(tmp_path):
    ds = gen_synthetic_manifold(SyntheticManifoldConfig(K=3, n_poses=200, seed=1))
    rng = np.random.default_rng(12)
    from nrdf.dataset import build_training_set
    from nrdf.sampling import DistanceSpec, SamplerConfig

    pairs = build_training_set(ds, SamplerConfig(DistanceSpec("halfgauss", (0.5,))), 1000, rng)
    arch = ModelArchitecture(K=3, decoder_hidden=(32, 32))
    cfg = TrainConfig(learning_rate=1e-3, epochs=8, batch_size=64)
    m1, curve = train(model_init(arch, np.random.default_rng(0)), ds, pairs, cfg,
                      np.random.default_rng(1))
    losses = [v for _, _, v in curve]
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]
    assert [s for _, s, _ in curve].count("stage2") == 2
    m2, _ = train(model_init(arch, np.random.default_rng(0)), ds, pairs, cfg,
                  np.random.default_rng(1))
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    save_loss_curve(curve, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,stage,mean_loss" and len(lines) == 9
    _, fm_curve = train(model_init(arch, np.random.default_rng(0)), ds, pairs,
                        TrainConfig(epochs=3, batch_size=64, mode="fmdis"), np.random.default_rng(1))
    assert {s for _, s, _ in fm_curve} == {"stage1"}


def test_checkpoint_roundtrip(tmp_path):
    model = tiny()
    path = tmp_path / "m.model"
    save_model(model, path)
    back = load_model(path, expected_arch=model.arch)
    q = mf.random_quaternion(np.random.default_rng(13), (50, 3))
    np.testing.assert_array_equal(forward(back, q), forward(model, q))


def test_checkpoint_errors(tmp_path):
    model = tiny()
    path = tmp_path / "m.model"
    save_model(model, path)
    text = path.read_text()
    bad = tmp_path / "bad.model"
    bad.write_text(text.replace("param dec0.W 12 8", "param dec0.W 8 12", 1))
    with pytest.raises(ArchitectureMismatch):
        load_model(bad)
    bad.write_text(text.replace("NRDF-MODEL v1", "NRDF-MODEL v2", 1))
    with pytest.raises(MalformedCheckpoint):
        load_model(bad)
    bad.write_text(text.replace("\nend\n", "\n"))
    with pytest.raises(MalformedCheckpoint):
        load_model(bad)
    with pytest.raises(ArchitectureMismatch):
        load_model(path, expected_arch=ModelArchitecture(K=3))
