import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgp.kernels import ArdKernel, gram
from deepgp.variational import (
    DiagonalGaussianField,
    entropy,
    entropy_gradient,
    kl_gradient,
    kl_to_standard_normal,
    psi_gradients,
    psi_statistics,
)

from conftest import central_diff
from oracles import mc_psi


def instance(seed, N=5, Q=2, K=3):
    r = np.random.default_rng(seed)
    k = ArdKernel(float(r.uniform(0.5, 2.0)), r.uniform(0.2, 2.0, Q))
    q = DiagonalGaussianField(r.normal(size=(N, Q)), r.uniform(0.05, 1.0, (N, Q)))
    return k, q, r.normal(size=(K, Q))


def test_field_validation():
    with pytest.raises(ValueError):
        DiagonalGaussianField(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DiagonalGaussianField(np.zeros((2, 2)), np.ones((2, 3)))


def test_second_moment_is_psd(rng):
    q = DiagonalGaussianField(rng.normal(size=(6, 2)), rng.uniform(0.1, 1, (6, 2)))
    M = q.second_moment()
    np.testing.assert_allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


def test_psi0_is_n_times_variance(rng):
    k = ArdKernel(1.7, [0.5, 2.0])
    q = DiagonalGaussianField(rng.normal(size=(7, 2)), rng.uniform(0.1, 1, (7, 2)))
    assert psi_statistics(k, q, rng.normal(size=(3, 2))).psi0 == pytest.approx(7 * 1.7)


def test_delta_limit(rng):
    k = ArdKernel(1.3, [0.5, 2.0])
    mu = rng.normal(size=(6, 2))
    Z = rng.normal(size=(4, 2))
    p = psi_statistics(k, DiagonalGaussianField(mu, np.full((6, 2), 1e-12)), Z)
    np.testing.assert_allclose(p.psi1, gram(k, mu, Z), atol=1e-6)
    p = psi_statistics(k, DiagonalGaussianField(mu, np.full((6, 2), 1e-10)), Z)
    assert np.max(np.abs(p.psi2 - p.psi1.T @ p.psi1)) < 1e-5 * k.variance**2


def test_rejects_bad_inputs(rng):
    k = ArdKernel(1.0, [1.0, 1.0])
    q = DiagonalGaussianField(np.zeros((3, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError, match="mismatch"):
        psi_statistics(k, q, np.zeros((2, 3)))
    q.variances[0, 0] = -1.0        # bypass construction-time validation
    with pytest.raises(ValueError, match="positive"):
        psi_statistics(k, q, np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_psi2_is_psd(seed):
    r = np.random.default_rng(seed)
    N, Q, K = int(r.integers(1, 8)), int(r.integers(1, 4)), int(r.integers(1, 6))
    k = ArdKernel(float(r.uniform(0.1, 3)), r.uniform(0, 4, Q))
    q = DiagonalGaussianField(r.normal(size=(N, Q)), r.uniform(1e-3, 2, (N, Q)))
    p2 = psi_statistics(k, q, 2 * r.normal(size=(K, Q))).psi2
    np.testing.assert_array_equal(p2, p2.T)
    assert np.linalg.eigvalsh(p2).min() >= -1e-8 * np.trace(p2)


def test_large_dimension_does_not_underflow():
    Q = 60
    k = ArdKernel(1.0, np.full(Q, 0.5))
    q = DiagonalGaussianField(np.zeros((3, Q)), np.full((3, Q), 0.2))
    p = psi_statistics(k, q, np.zeros((2, Q)))
    assert np.all(p.psi1 > 0) and np.all(np.isfinite(p.psi2))


@pytest.mark.slow
def test_monte_carlo_oracle():
    k, q, Z = instance(0)
    p = psi_statistics(k, q, Z)
    psi0, m1, se1, m2, se2 = mc_psi(k.variance, k.weights, q.means, q.variances, Z, seed=99)
    assert p.psi0 == pytest.approx(psi0)
    assert np.all(np.abs(p.psi1 - m1) <= 3 * se1)
    assert np.all(np.abs(p.psi2 - m2) <= 3 * se2)


def test_psi0_gradient_special_cases(rng):
    k, q, Z = instance(3)
    g = psi_gradients(k, q, Z, 1.0, np.zeros((5, 3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(g["means"], 0.0)
    assert g["variance"] == pytest.approx(5.0)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_psi_gradients_match_finite_differences(seed):
    k, q, Z = instance(seed, N=4, Q=2, K=3)
    r = np.random.default_rng(seed + 1)
    G0, G1, G2 = r.normal(), r.normal(size=(4, 3)), r.normal(size=(3, 3))

    def f(var=k.variance, w=k.weights, Zi=Z, mu=q.means, S=q.variances):
        p = psi_statistics(ArdKernel(var, w), DiagonalGaussianField(mu, S), Zi)
        return G0 * p.psi0 + np.sum(G1 * p.psi1) + np.sum(G2 * p.psi2)

    g = psi_gradients(k, q, Z, G0, G1, G2)
    assert _rel_err(np.atleast_1d(g["variance"]), central_diff(lambda x: f(var=x[0]), np.array([k.variance]))) < 1e-5
    assert _rel_err(g["weights"], central_diff(lambda x: f(w=x), k.weights)) < 1e-5
    assert _rel_err(g["inducing"], central_diff(lambda x: f(Zi=x), Z)) < 1e-5
    assert _rel_err(g["means"], central_diff(lambda x: f(mu=x), q.means)) < 1e-5
    assert _rel_err(g["variances"], central_diff(lambda x: f(S=x), q.variances)) < 1e-5


def test_entropy_values():
    assert entropy(DiagonalGaussianField([[0.0]], [[1.0]])) == pytest.approx(1.4189385332046727)
    # 6 * 0.5 * log(2 pi e * 0.5) = 3 * (log(pi) + 1)
    q = DiagonalGaussianField(np.zeros((2, 3)), np.full((2, 3), 0.5))
    assert entropy(q) == pytest.approx(3 * (np.log(np.pi) + 1), rel=1e-12)
    assert entropy(q) == pytest.approx(6.434189657547, rel=1e-10)


def test_entropy_doubling_law(rng):
    S = rng.uniform(0.1, 2, (4, 3))
    q1 = DiagonalGaussianField(np.zeros((4, 3)), S)
    q2 = DiagonalGaussianField(np.zeros((4, 3)), 2 * S)
    assert entropy(q2) - entropy(q1) == pytest.approx(6 * np.log(2))


def test_kl_values():
    assert kl_to_standard_normal(DiagonalGaussianField(np.zeros((3, 2)), np.ones((3, 2)))) == 0.0
    assert kl_to_standard_normal(DiagonalGaussianField([[1.0]], [[1.0]])) == pytest.approx(0.5)
    assert kl_to_standard_normal(DiagonalGaussianField([[0.0]], [[2.0]])) == pytest.approx(
        0.1534264097200273, rel=1e-12
    )


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_kl_non_negative(seed):
    r = np.random.default_rng(seed)
    q = DiagonalGaussianField(r.normal(size=(3, 2)), r.uniform(0.01, 5, (3, 2)))
    assert kl_to_standard_normal(q) > 1e-12


def test_entropy_and_kl_gradients(rng):
    mu, S = rng.normal(size=(3, 2)), rng.uniform(0.2, 2, (3, 2))
    q = DiagonalGaussianField(mu, S)
    np.testing.assert_allclose(
        entropy_gradient(q), central_diff(lambda s: entropy(DiagonalGaussianField(mu, s)), S), rtol=1e-6
    )
    gm, gs = kl_gradient(q)
    np.testing.assert_allclose(gm, central_diff(lambda m: kl_to_standard_normal(DiagonalGaussianField(m, S)), mu), rtol=1e-6)
    np.testing.assert_allclose(gs, central_diff(lambda s: kl_to_standard_normal(DiagonalGaussianField(mu, s)), S), rtol=1e-6)
