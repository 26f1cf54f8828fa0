import numpy as np
import pytest
from scipy import integrate

from rlpomcp.nn import (
    Adam,
    CheckpointError,
    Mlp,
    ShapeMismatch,
    gaussian_log_prob,
    gaussian_policy,
    load_checkpoint,
    save_checkpoint,
    squashed_log_prob,
)


def naive_forward(net, x):
    """Triple-loop matrix products, independent of numpy's matmul."""
    h = list(map(float, x))
    for i in range(net.n_layers):
        W, b = net.params[2 * i], net.params[2 * i + 1]
        out = []
        for j in range(W.shape[1]):
            s = b[j]
            for k in range(W.shape[0]):
                s += h[k] * W[k, j]
            out.append(s)
        h = out if i == net.n_layers - 1 else [np.tanh(v) for v in out]
    return np.array(h)


def finite_difference_check(net, x, w, eps=1e-5):
    def loss():
        return float(np.sum(net.forward(x)[0] * w))

    _, cache = net.forward(x)
    grads, _ = net.backward(cache, np.broadcast_to(w, net.forward(x)[0].shape))
    worst = 0.0
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss()
            p[idx] = old - eps
            down = loss()
            p[idx] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    return worst


def test_zero_weights_give_bias():
    net = Mlp([3, 4, 2])
    for p in net.params:
        p[...] = 0.0
    net.params[-1][...] = [0.7, -1.2]
    np.testing.assert_array_equal(net.forward([1.0, 2.0, 3.0])[0], [0.7, -1.2])


def test_identity_single_layer():
    net = Mlp([3, 3])
    net.params[0][...] = np.eye(3)
    np.testing.assert_array_equal(net.forward([0.1, -2.0, 5.0])[0], [0.1, -2.0, 5.0])


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_naive(seed):
    rng = np.random.default_rng(seed)
    net = Mlp([5, 7, 6, 3], rng)
    x = rng.normal(size=5)
    np.testing.assert_allclose(net.forward(x)[0], naive_forward(net, x), atol=1e-10)
    X = rng.normal(size=(4, 5))
    batch = net.forward(X)[0]
    for row, out in zip(X, batch):
        np.testing.assert_allclose(out, naive_forward(net, row), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp([4, 8, 8, 3], rng, output_gain=1.0)
    X = rng.normal(size=(6, 4))
    w = rng.normal(size=(6, 3))
    assert finite_difference_check(net, X, w) <= 1e-4


def test_backward_zero_and_linear():
    rng = np.random.default_rng(1)
    net = Mlp([3, 5, 2], rng)
    _, cache = net.forward(rng.normal(size=(4, 3)))
    zero, gx = net.backward(cache, np.zeros((4, 2)))
    assert all(not g.any() for g in zero) and not gx.any()
    g = rng.normal(size=(4, 2))
    one, _ = net.backward(cache, g)
    two, _ = net.backward(cache, 2 * g)
    for a, b in zip(one, two):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12)
    with pytest.raises(ShapeMismatch):
        net.backward(cache, np.zeros((4, 3)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros(4))


def test_adam_properties():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.01)
    opt.step(p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.01)
    opt.step(p, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [1.0 - 0.01, -2.0 + 0.01], atol=1e-8)


def test_adam_minimizes_square():
    w = [np.array([1.0])]
    opt = Adam(w, lr=0.05)
    for _ in range(100):
        opt.step(w, [2 * w[0]])
    assert abs(w[0][0]) < 0.1


def test_policy_vanishing_noise():
    rng = np.random.default_rng(0)
    a, u, logp, _ = gaussian_policy(np.zeros(4), np.full(4, -5.0), rng)
    assert np.all(np.abs(a) < 0.01)
    far = np.clip(a + 0.5, -0.99, 0.99)
    assert logp >= squashed_log_prob(far, np.zeros(4), np.full(4, -5.0))
    assert squashed_log_prob(a, np.zeros(4), np.full(4, -5.0)) == pytest.approx(logp, abs=1e-6)


def test_log_std_clamped():
    rng = np.random.default_rng(0)
    _, _, _, ent_hi = gaussian_policy(np.zeros(1), np.array([9.0]), rng)
    _, _, _, ent_1 = gaussian_policy(np.zeros(1), np.array([1.0]), rng)
    assert ent_hi == ent_1


@pytest.mark.parametrize("mean,log_std", [(0.4, -0.3), (-1.0, 0.5), (1.5, -1.0)])
def test_squashed_mean_matches_quadrature(mean, log_std):
    rng = np.random.default_rng(3)
    draws = np.array([gaussian_policy(np.array([mean]), np.array([log_std]), rng)[0][0] for _ in range(100_000)])
    sd = np.exp(log_std)
    expect, _ = integrate.quad(
        lambda u: np.tanh(u) * np.exp(-0.5 * ((u - mean) / sd) ** 2) / (sd * np.sqrt(2 * np.pi)),
        mean - 12 * sd, mean + 12 * sd)
    assert draws.mean() == pytest.approx(expect, abs=0.01)


def test_log_prob_normalizes():
    # density of a = tanh(u) integrates to one on (-1, 1)
    total, _ = integrate.quad(lambda a: np.exp(squashed_log_prob([a], np.array([0.3]), np.array([-0.2]))),
                              -1 + 1e-9, 1 - 1e-9, limit=200)
    assert total == pytest.approx(1.0, abs=1e-4)
    assert gaussian_log_prob(np.zeros(1), np.zeros(1), np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2), "s": np.array(0.25)}
    save_checkpoint(tmp_path / "c.ckpt", arrays, {"k": [1, 2]})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"k": [1, 2]}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    (tmp_path / "bad.ckpt").write_text("hello\n{}\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
