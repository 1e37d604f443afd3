import numpy as np
import pytest

from bitweave.nn import (Adam, Conv3x3, Dense, QNetwork, ReLU, Reshape, RewardModel, Sequential,
                         hidden_width, load_arrays, numerical_gradient, save_arrays)


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def randomize(net, rng):
    # nonzero biases keep pre-activations away from the ReLU kink
    for p in net.params().values():
        p[...] = rng.normal(scale=0.5, size=p.shape)


def check_net(net, x, rng, max_entries=40):
    proj = rng.normal(size=net.forward(x).shape)

    def loss():
        return float(np.sum(net.forward(x) * proj))

    loss()
    analytic = {k: v.copy() for k, v in net.backward(proj).items()}
    worst = 0.0
    for k, p in net.params().items():
        flat = list(np.ndindex(p.shape))
        pick = rng.choice(len(flat), size=min(max_entries, len(flat)), replace=False)
        for i in pick:
            idx = flat[i]
            num = numerical_gradient(loss, p, index=idx)
            worst = max(worst, max_rel_err(np.array(analytic[k][idx]), np.array(num)))
    return worst


def check_input_grad(net, x, rng):
    proj = rng.normal(size=net.forward(x).shape)
    net.forward(x)
    g = x.copy()
    out = proj
    for layer in reversed(net.layers):
        out = layer.backward(out)
    num = numerical_gradient(lambda: float(np.sum(net.forward(g) * proj)), g)
    return max_rel_err(out, num)


@pytest.mark.parametrize("name", ["conv", "dense", "relu", "reshape"])
def test_layer_gradients(name):
    rng = np.random.default_rng(1)
    if name == "conv":
        net, x = Sequential([Conv3x3(2, 3, rng)]), rng.normal(size=(2, 2, 3, 5))
    elif name == "dense":
        net, x = Sequential([Dense(6, 4, rng)]), rng.normal(size=(3, 6))
    elif name == "relu":
        net, x = Sequential([Dense(6, 4, rng), ReLU()]), rng.normal(size=(3, 6))
    else:
        net, x = Sequential([Reshape((6,)), Dense(6, 2, rng), Reshape((2, 1))]), rng.normal(size=(2, 2, 3))
    randomize(net, rng)
    assert check_net(net, x, rng) <= 1e-4
    assert check_input_grad(net, x, rng) <= 1e-4


def test_qnetwork_gradients():
    rng = np.random.default_rng(2)
    net = QNetwork(3, 6, seed=0)
    randomize(net, rng)
    x = rng.uniform(0.1, 1.0, size=(2, 3, 6))
    assert check_net(net, x, rng, max_entries=25) <= 1e-4


def test_reward_model_gradients():
    rng = np.random.default_rng(3)
    net = RewardModel(3, 6, seed=0)
    randomize(net, rng)
    x = rng.uniform(0.1, 1.0, size=(4, 3, 6))
    assert check_net(net, x, rng, max_entries=25) <= 1e-4


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    conv = Conv3x3(2, 3, rng)
    conv.params["b"][...] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 4, 5))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros((1, 3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                expect[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * conv.params["w"][o]) + conv.params["b"][o]
    np.testing.assert_allclose(conv.forward(x), expect, rtol=1e-12, atol=1e-12)


def test_qnetwork_shapes():
    net = QNetwork(3, 6, hidden_scale=4, seed=0)
    assert net.hidden == hidden_width(3, 6) == 72
    assert net(np.zeros((3, 6))).shape == (3,)
    assert net(np.zeros((5, 3, 6))).shape == (5, 3)
    with pytest.raises(ValueError):
        net(np.zeros((6, 3)))


def test_qnetwork_seeded():
    a, b = QNetwork(3, 6, seed=7), QNetwork(3, 6, seed=7)
    x = np.random.default_rng(0).integers(0, 2, size=(3, 6))
    assert np.array_equal(a(x), b(x))
    c = QNetwork(3, 6, seed=8)
    assert not np.array_equal(a(x), c(x))


def test_reward_model_scalar():
    m = RewardModel(2, 4, seed=0)
    assert isinstance(m(np.zeros((2, 4))), float)
    assert m(np.zeros((3, 2, 4))).shape == (3,)


def test_copy_from_and_shape_check():
    a, b = QNetwork(2, 3, seed=1), QNetwork(2, 3, seed=2)
    b.copy_from(a)
    x = np.ones((2, 3))
    assert np.array_equal(a(x), b(x))
    with pytest.raises(ValueError):
        QNetwork(2, 4).set_params(a.params())


def test_adam_first_step():
    # bias correction makes the first step exactly lr * sign(g) up to eps
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    opt = Adam()
    assert opt.step(p, g, lr=0.1)
    expect = np.array([1.0, -2.0, 0.5]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)


def test_adam_second_step_reference():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    g1, g2 = 0.5, -1.5
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    w = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    w = w - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    p = {"w": np.array([1.0])}
    opt = Adam()
    opt.step(p, {"w": np.array([g1])}, lr)
    opt.step(p, {"w": np.array([g2])}, lr)
    assert p["w"][0] == pytest.approx(w, rel=1e-14)


def test_adam_rejects_non_finite():
    p = {"w": np.array([1.0, 2.0])}
    opt = Adam()
    assert not opt.step(p, {"w": np.array([np.nan, 1.0])}, 0.1)
    assert opt.t == 0 and p["w"].tolist() == [1.0, 2.0]


def test_checkpoint_bitwise(tmp_path):
    net = QNetwork(3, 6, seed=3)
    opt = Adam()
    x = np.ones((1, 3, 6))
    net.forward(x)
    opt.step(net.params(), net.backward(np.ones((1, 3))), 1e-3)
    save_arrays(tmp_path / "net.npz", net.params())
    save_arrays(tmp_path / "opt.npz", opt.state())
    other = QNetwork(3, 6, seed=4)
    other.set_params(load_arrays(tmp_path / "net.npz"))
    for k, v in net.params().items():
        assert np.array_equal(v, other.params()[k])
    opt2 = Adam()
    opt2.load_state(load_arrays(tmp_path / "opt.npz"))
    assert opt2.t == 1
    for k in opt.m:
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])


def test_checkpoint_version_check(tmp_path):
    np.savez(tmp_path / "bad.npz", __version__=np.array(99), w=np.zeros(2))
    with pytest.raises(ValueError, match="version"):
        load_arrays(tmp_path / "bad.npz")
