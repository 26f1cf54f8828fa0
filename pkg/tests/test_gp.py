import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlpomcp.gp import GpModel, KernelHyper, NumericalFailure, condition, kernel_eval, predict


def dense_oracle(X, y, Q, h: KernelHyper):
    """Posterior by explicit kernel matrices and a dense solve, in world units."""
    def k(A, B):
        d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        return h.signal_variance * np.exp(-d2 / (2 * h.lengthscale**2))

    K = k(X, X) + h.noise_variance * np.eye(len(X))
    Ks = k(X, Q)
    mean = h.prior_mean + Ks.T @ np.linalg.solve(K, y - h.prior_mean)
    var = h.signal_variance - np.einsum("ij,ij->j", Ks, np.linalg.solve(K, Ks))
    return mean, np.maximum(var, 0)


def random_model(seed, n, hyper=None, box=10.0):
    rng = np.random.default_rng(seed)
    h = hyper or KernelHyper(lengthscale=2.0, signal_variance=1.5, noise_variance=1e-2, prior_mean=0.3)
    X = rng.uniform(0, box, (n, 3))
    y = np.sin(X.sum(1)) + rng.normal(0, 0.1, n)
    model = GpModel.for_bounds(h, [0, 0, 0], [box] * 3).condition(list(zip(X, y)))
    return model, X, y, h, rng


def test_kernel_examples():
    h = KernelHyper(lengthscale=0.7, signal_variance=2.5)
    a = np.array([1.0, 2.0, 3.0])
    assert kernel_eval(a, a, h) == 2.5
    h1 = KernelHyper(lengthscale=0.7)
    assert kernel_eval(a, a + np.array([0.7, 0, 0]), h1) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert kernel_eval(a, a + np.array([0, 20 * 0.7, 0]), h1) < 1e-12


def test_hyper_validation():
    with pytest.raises(ValueError):
        KernelHyper(lengthscale=0)
    with pytest.raises(ValueError):
        KernelHyper(signal_variance=-1)
    with pytest.raises(ValueError):
        KernelHyper(noise_variance=-1e-3)
    assert KernelHyper.for_extent(10.0).lengthscale == pytest.approx(1.2)


def test_empty_model_is_prior():
    h = KernelHyper(lengthscale=1.0, signal_variance=2.0, prior_mean=-0.4)
    p = predict(GpModel(h), [0.3, 0.2, 0.1])
    assert (p.mean, p.variance) == (-0.4, 2.0)


def test_noise_free_interpolation():
    h = KernelHyper(lengthscale=1.0, noise_variance=0.0)
    x0 = np.array([0.5, 0.5, 0.5])
    m = condition(GpModel(h), [(x0, 2.0)])
    p = m.predict(x0)
    assert p.mean == pytest.approx(2.0, abs=1e-12)
    assert p.variance == pytest.approx(0.0, abs=1e-9)


def test_condition_empty_is_identity():
    m, *_ = random_model(0, 4)
    assert condition(m, []) is m


@pytest.mark.parametrize("n", [3, 10, 50])
def test_matches_dense_solve(n):
    m, X, y, h, rng = random_model(n, n)
    Q = rng.uniform(0, 10, (30, 3))
    mean, var = m.predict_many(Q)
    om, ov = dense_oracle(X, y, Q, h)
    np.testing.assert_allclose(mean, om, atol=1e-8)
    np.testing.assert_allclose(var, ov, atol=1e-8)


def test_incremental_factor_matches_batch():
    m, X, *_ = random_model(1, 0)
    rng = np.random.default_rng(2)
    for _ in range(20):  # 200 samples in batches of 10
        pts = rng.uniform(0, 10, (10, 3))
        m = m.condition([(p, float(np.cos(p[0]))) for p in pts])
    assert len(m) == 200
    np.testing.assert_allclose(m.factor, m.refactor(), atol=1e-10)
    assert np.all(np.diag(m.factor) > 0)
    assert np.allclose(np.triu(m.factor, 1), 0)


def test_condition_is_immutable():
    m, X, y, h, rng = random_model(3, 5)
    before = m.predict_many(X)
    m.condition([(np.array([1.0, 1.0, 1.0]), 5.0)])
    np.testing.assert_array_equal(before[0], m.predict_many(X)[0])


def test_duplicate_points_survive_with_jitter():
    h = KernelHyper(lengthscale=1.0, noise_variance=0.0)
    x = np.array([0.2, 0.2, 0.2])
    m = GpModel(h).condition([(x, 1.0), (x, 1.0)])
    assert len(m) == 2
    assert m.predict(x).mean == pytest.approx(1.0, abs=1e-5)


def test_numerical_failure_when_jitter_exhausted():
    from rlpomcp.gp import _chol_with_jitter

    with pytest.raises(NumericalFailure):
        _chol_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))
    # a tiny negative eigenvalue is absorbed by the ladder
    S = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-12]])
    L = _chol_with_jitter(S)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 25))
def test_variance_bounds_and_monotone(seed, n):
    m, X, y, h, rng = random_model(seed, n)
    Q = rng.uniform(-2, 12, (15, 3))
    _, v1 = m.predict_many(Q)
    assert np.all(v1 >= 0) and np.all(v1 <= h.signal_variance + 1e-9)
    m2 = m.condition([(rng.uniform(0, 10, 3), 0.0)])
    _, v2 = m2.predict_many(Q)
    assert np.all(v2 <= v1 + 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_order_independence(seed):
    m, X, y, h, rng = random_model(seed, 12)
    perm = rng.permutation(len(X))
    m2 = GpModel.for_bounds(h, [0, 0, 0], [10] * 3).condition(list(zip(X[perm], y[perm])))
    Q = rng.uniform(0, 10, (10, 3))
    for a, b in zip(m.predict_many(Q), m2.predict_many(Q)):
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_normalization_does_not_change_kernel():
    # same samples, one model in raw units and one normalized to a big box
    h = KernelHyper(lengthscale=3.0, noise_variance=1e-3)
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 50, (8, 3))
    y = rng.normal(size=8)
    a = GpModel(h).condition(list(zip(X, y)))
    b = GpModel.for_bounds(h, [0, 0, 0], [50, 50, 50]).condition(list(zip(X, y)))
    Q = rng.uniform(0, 50, (6, 3))
    for u, v in zip(a.predict_many(Q), b.predict_many(Q)):
        np.testing.assert_allclose(u, v, atol=1e-9)
