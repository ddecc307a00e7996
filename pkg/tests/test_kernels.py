import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgp.kernels import (
    ArdKernel,
    JitterError,
    LinearKernel,
    SumKernel,
    ard_gram_vjp,
    gram,
    gram_gradients,
    jitter_cholesky,
    kdiag,
)

from conftest import central_diff


def test_self_covariance_is_variance():
    k = ArdKernel(2.0, [0.3, 4.0])
    assert gram(k, [[1.5, -2.0]])[0, 0] == 2.0


def test_zero_weights_give_constant_kernel(rng):
    k = ArdKernel(1.0, np.zeros(3))
    K = gram(k, rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(K, np.ones((4, 5)))


def test_hand_computed_value():
    # exp(-0.5 * 1 * (0 - 2)^2) = exp(-2)
    K = gram(ArdKernel(1.0, [1.0]), [[0.0]], [[2.0]])
    assert K[0, 0] == pytest.approx(0.1353352832366127, rel=1e-12)


def test_symmetric_with_exact_diagonal(rng):
    k = ArdKernel(1.7, rng.uniform(0.1, 2, 3))
    A = rng.normal(size=(6, 3))
    K = gram(k, A)
    np.testing.assert_array_equal(K, K.T)
    np.testing.assert_array_equal(np.diag(K), np.full(6, 1.7))
    np.testing.assert_array_equal(kdiag(k, A), np.diag(K))


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="columns"):
        gram(ArdKernel(1.0, [1.0, 1.0]), rng.normal(size=(3, 3)))
    with pytest.raises(ValueError, match="differ"):
        gram(ArdKernel(1.0, [1.0, 1.0]), rng.normal(size=(3, 2)), rng.normal(size=(3, 1)))


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        ArdKernel(0.0, [1.0])
    with pytest.raises(ValueError):
        ArdKernel(1.0, [-1.0])


def test_linear_and_sum_kernels(rng):
    A = rng.normal(size=(5, 2))
    lin = LinearKernel(0.5, input_dim=2)
    K = gram(lin, A)
    np.testing.assert_allclose(K, 0.5 * A @ A.T)
    assert np.linalg.matrix_rank(K) <= 2
    s = SumKernel([lin, ArdKernel(1.0, [1.0, 1.0])])
    np.testing.assert_allclose(gram(s, A), K + gram(ArdKernel(1.0, [1.0, 1.0]), A))


def test_variance_gradient_is_scaled_kernel(rng):
    k = ArdKernel(2.5, [0.4, 1.2])
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    g = gram_gradients(k, A, B)
    np.testing.assert_allclose(g["variance"], gram(k, A, B) / 2.5)


def test_weight_gradient_vanishes_on_diagonal(rng):
    k = ArdKernel(1.0, [0.4, 1.2])
    A = rng.normal(size=(3, 2))
    g = gram_gradients(k, A, A)
    for q in range(2):
        np.testing.assert_array_equal(np.diag(g["weights"][q]), 0.0)


def test_gram_gradients_match_finite_differences(rng):
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    var, w = 1.3, np.array([0.7, 1.9])
    g = gram_gradients(ArdKernel(var, w), A, B)

    num_var = (gram(ArdKernel(var + 1e-6, w), A, B) - gram(ArdKernel(var - 1e-6, w), A, B)) / 2e-6
    np.testing.assert_allclose(g["variance"], num_var, rtol=1e-6)
    for q in range(2):
        wp, wm = w.copy(), w.copy()
        wp[q] += 1e-6
        wm[q] -= 1e-6
        num = (gram(ArdKernel(var, wp), A, B) - gram(ArdKernel(var, wm), A, B)) / 2e-6
        np.testing.assert_allclose(g["weights"][q], num, rtol=1e-6)
    for n in range(3):
        for q in range(2):
            Ap, Am = A.copy(), A.copy()
            Ap[n, q] += 1e-6
            Am[n, q] -= 1e-6
            num = (gram(ArdKernel(var, w), Ap, B) - gram(ArdKernel(var, w), Am, B))[n] / 2e-6
            np.testing.assert_allclose(g["inputs"][n, :, q], num, rtol=1e-6)


def test_linear_gradients(rng):
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    g = gram_gradients(LinearKernel(2.0, 2), A, B)
    np.testing.assert_allclose(g["variance"], A @ B.T)
    num = central_diff(lambda a: gram(LinearKernel(2.0, 2), a, B)[1, 2], A)
    np.testing.assert_allclose(g["inputs"][1, 2], num[1], rtol=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_vjp_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    Q = int(r.integers(1, 4))
    A, B = r.normal(size=(4, Q)), r.normal(size=(3, Q))
    var, w = float(r.uniform(0.2, 3)), r.uniform(0.05, 3, Q)
    G = r.normal(size=(4, 3))
    dv, dw, dA, dB = ard_gram_vjp(ArdKernel(var, w), A, B, G)
    f = lambda v, ww, a, b: np.sum(G * gram(ArdKernel(v, ww), a, b))
    num = [
        central_diff(lambda x: f(x[0], w, A, B), np.array([var])),
        central_diff(lambda x: f(var, x, A, B), w),
        central_diff(lambda x: f(var, w, x, B), A),
        central_diff(lambda x: f(var, w, A, x), B),
    ]
    for an, nu in zip([np.atleast_1d(dv), dw, dA, dB], num):
        err = np.abs(an - nu) / np.maximum(np.maximum(np.abs(an), np.abs(nu)), 1e-2)
        assert np.max(err) < 1e-5


def test_vjp_same_inputs(rng):
    k = ArdKernel(1.1, [0.6, 2.0])
    Z = rng.normal(size=(4, 2))
    G = rng.normal(size=(4, 4))
    G = G + G.T
    _, _, dZ, none = ard_gram_vjp(k, Z, Z, G)
    assert none is None
    num = central_diff(lambda z: np.sum(G * gram(k, z)), Z)
    np.testing.assert_allclose(dZ, num, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), q=st.integers(1, 4))
def test_gram_is_psd(seed, n, q):
    r = np.random.default_rng(seed)
    k = ArdKernel(float(r.uniform(0.1, 5)), r.uniform(0, 5, q))
    K = gram(k, r.normal(size=(n, q)))
    assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), q=st.integers(1, 4), bump=st.floats(1e-3, 5.0))
def test_increasing_weight_never_increases_covariance(seed, q, bump):
    r = np.random.default_rng(seed)
    w = r.uniform(0, 3, q)
    A, B = r.normal(size=(5, q)), r.normal(size=(5, q))
    base = gram(ArdKernel(1.0, w), A, B)
    dim = int(r.integers(q))
    w2 = w.copy()
    w2[dim] += bump
    assert np.all(gram(ArdKernel(1.0, w2), A, B) <= base + 1e-15)


def test_cholesky_identity():
    L, jitter = jitter_cholesky(np.eye(4))
    np.testing.assert_array_equal(L, np.eye(4))
    assert jitter == 0.0


def test_cholesky_singular_psd_needs_jitter(rng):
    v = rng.normal(size=(5, 1))
    L, jitter = jitter_cholesky(v @ v.T)
    assert jitter > 0
    np.testing.assert_allclose(L @ L.T, v @ v.T + jitter * np.eye(5), atol=1e-10)


def test_cholesky_reconstructs_wishart(rng):
    W = rng.normal(size=(5, 8))
    K = W @ W.T
    L, _ = jitter_cholesky(K)
    assert np.allclose(L, np.tril(L))
    np.testing.assert_allclose(L @ L.T, K, atol=1e-8)


def test_cholesky_failure_names_matrix():
    K = np.diag([2.0, -1.0])
    with pytest.raises(JitterError, match="my matrix.*condition"):
        jitter_cholesky(K, name="my matrix")
