"""Factorised Gaussian variational distributions and kernel expectations.

For an ARD kernel and ``x_n ~ N(mu_n, diag(S_n))`` the expectations used by
the collapsed bound are available in closed form:

    psi0 = sum_n E[k(x_n, x_n)]                   (scalar)
    psi1 = E[k(x_n, z_k)]                         (N x K)
    psi2 = sum_n E[k(z_k, x_n) k(x_n, z_k')]      (K x K)

All products over input dimensions are accumulated as sums of logs before
exponentiating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import ArdKernel

LOG_2PIE = np.log(2.0 * np.pi * np.e)

# upper bound on elements of the (chunk, K, K, Q) psi2 work arrays
_PSI2_CHUNK_ELEMENTS = 2_000_000


@dataclass
class DiagonalGaussianField:
    """``q(X) = prod_{n,q} N(x_nq | means[n,q], variances[n,q])``."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise ValueError(
                f"means {self.means.shape} and variances {self.variances.shape} differ in shape"
            )
        if not np.all(self.variances > 0):
            raise ValueError("variational variances must be strictly positive")

    @property
    def shape(self):
        return self.means.shape

    @property
    def num_data(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def second_moment(self) -> np.ndarray:
        """``<X X^T> = sum_q (mu_q mu_q^T + diag(S_q))`` (N x N, for inspection only)."""
        return self.means @ self.means.T + np.diag(self.variances.sum(1))

    def copy(self) -> "DiagonalGaussianField":
        return DiagonalGaussianField(self.means.copy(), self.variances.copy())

    def columns(self, cols) -> "DiagonalGaussianField":
        return DiagonalGaussianField(self.means[:, cols], self.variances[:, cols])


@dataclass
class PsiStatistics:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


def _validate(kernel, q, inducing):
    if not isinstance(kernel, ArdKernel):
        raise TypeError("psi statistics are only available for ArdKernel")
    inducing = np.atleast_2d(np.asarray(inducing, dtype=float))
    if not (kernel.input_dim == q.dim == inducing.shape[1]):
        raise ValueError(
            f"dimension mismatch: kernel {kernel.input_dim}, q(X) {q.dim}, "
            f"inducing {inducing.shape[1]}"
        )
    if not np.all(q.variances > 0):
        raise ValueError("psi statistics need strictly positive variances")
    return inducing


def _chunks(N, K, Q):
    size = max(1, _PSI2_CHUNK_ELEMENTS // max(1, K * K * Q))
    return [slice(i, min(i + size, N)) for i in range(0, N, size)]


def _psi1_parts(kernel, mu, S, Z):
    w = kernel.weights
    den = w * S + 1.0                                 # (N, Q)
    d = mu[:, None, :] - Z[None, :, :]                # (N, K, Q)
    log_psi1 = (
        np.log(kernel.variance)
        - 0.5 * np.sum(np.log(den), 1)[:, None]
        - 0.5 * np.einsum("nkq,q,nq->nk", d**2, w, 1.0 / den)
    )
    return np.exp(log_psi1), d, den


def _psi2_chunk(kernel, mu, S, Z):
    """Per-datapoint psi2 contributions for one chunk.

    Returns ``t`` (n, K, K) with the flattened midpoints ``zbar`` (K*K, Q), the
    pairwise differences ``dz`` (K, K, Q) and ``a = w / den`` (n, Q). The
    quadratic form in ``mu - zbar`` is expanded so that every contraction is a
    matrix product and no (n, K, K, Q) array is formed.
    """
    w = kernel.weights
    K, Q = Z.shape
    den = 2.0 * w * S + 1.0                           # (n, Q)
    a = w / den
    dz = Z[:, None, :] - Z[None, :, :]                # (K, K, Q)
    zbar = (0.5 * (Z[:, None, :] + Z[None, :, :])).reshape(K * K, Q)
    quad = (
        np.sum(a * mu**2, 1)[:, None]
        - 2.0 * (a * mu) @ zbar.T
        + a @ (zbar**2).T
    )                                                 # (n, K*K)
    log_t = (
        2.0 * np.log(kernel.variance)
        - 0.5 * np.sum(np.log(den), 1)[:, None]
        - 0.25 * ((dz**2).reshape(K * K, Q) @ w)[None]
        - quad
    )
    return np.exp(log_t).reshape(-1, K, K), zbar, dz, a


def psi_statistics(kernel: ArdKernel, q: DiagonalGaussianField, inducing) -> PsiStatistics:
    """Closed-form expectations of ARD kernel quantities under ``q``."""
    Z = _validate(kernel, q, inducing)
    N, Q = q.shape
    K = Z.shape[0]
    psi0 = N * kernel.variance
    psi1, _, _ = _psi1_parts(kernel, q.means, q.variances, Z)
    psi2 = np.zeros((K, K))
    # fixed chunk order keeps the reduction deterministic
    for sl in _chunks(N, K, Q):
        t, *_ = _psi2_chunk(kernel, q.means[sl], q.variances[sl], Z)
        psi2 += t.sum(0)
    psi2 = 0.5 * (psi2 + psi2.T)
    return PsiStatistics(psi0, psi1, psi2)


def psi_gradients(kernel: ArdKernel, q: DiagonalGaussianField, inducing, dpsi0, dpsi1, dpsi2):
    """Back-propagate cotangents of the psi statistics.

    Given ``dpsi0`` (scalar), ``dpsi1`` (N x K) and ``dpsi2`` (K x K), returns the
    gradient of ``dpsi0*psi0 + sum(dpsi1*psi1) + sum(dpsi2*psi2)`` with respect
    to each input, as a dict with keys ``variance``, ``weights``, ``inducing``,
    ``means`` and ``variances``.
    """
    Z = _validate(kernel, q, inducing)
    mu, S = q.means, q.variances
    N, Q = mu.shape
    K = Z.shape[0]
    w = kernel.weights
    dpsi1 = np.asarray(dpsi1, dtype=float)
    dpsi2 = np.asarray(dpsi2, dtype=float)
    dpsi2 = 0.5 * (dpsi2 + dpsi2.T)

    g_var = float(dpsi0) * N
    g_w = np.zeros(Q)
    g_Z = np.zeros_like(Z)
    g_mu = np.zeros_like(mu)
    g_S = np.zeros_like(S)

    psi1, d, den1 = _psi1_parts(kernel, mu, S, Z)
    T = dpsi1 * psi1                                  # (N, K)
    g_var += T.sum() / kernel.variance
    inv1 = 1.0 / den1                                 # (N, Q)
    wd = d * (w * inv1)[:, None, :]                   # w d / den, (N, K, Q)
    g_mu -= np.einsum("nk,nkq->nq", T, wd)
    g_Z += np.einsum("nk,nkq->kq", T, wd)
    d2 = d**2
    g_S += -0.5 * (w * inv1) * T.sum(1)[:, None] + 0.5 * np.einsum(
        "nk,nkq->nq", T, d2
    ) * (w * inv1) ** 2
    g_w += -0.5 * np.einsum("n,nq->q", T.sum(1), S * inv1) - 0.5 * np.einsum(
        "nk,nkq,nq->q", T, d2, inv1**2
    )

    for sl in _chunks(N, K, Q):
        m, v = mu[sl], S[sl]
        t, zbar, dz, a = _psi2_chunk(kernel, m, v, Z)
        T2 = (t * dpsi2[None]).reshape(-1, K * K)      # (n, K*K)
        Tn = T2.sum(1)
        g_var += 2.0 * Tn.sum() / kernel.variance
        # sums over (k, l) of T2 * e and T2 * e**2, with e = mu - zbar
        Te = m * Tn[:, None] - T2 @ zbar              # (n, Q)
        Te2 = m**2 * Tn[:, None] - 2.0 * m * (T2 @ zbar) + T2 @ zbar**2
        g_mu[sl] += -2.0 * a * Te
        g_S[sl] += -a * Tn[:, None] + 2.0 * a**2 * Te2
        inv2 = 1.0 / (2.0 * w * v + 1.0)
        Tkl = T2.sum(0).reshape(K, K)
        g_w += (
            -Tn @ (v * inv2)
            - 0.25 * np.einsum("kl,klq->q", Tkl, dz**2)
            - np.sum(inv2**2 * Te2, 0)
        )
        # sum over n of T2 * a * e, per (k, l)
        Twe = T2.T @ (a * m) - zbar * (T2.T @ a)      # (K*K, Q)
        g_Z += 2.0 * (
            -0.5 * np.einsum("kl,klq->kq", Tkl, dz) * w
            + Twe.reshape(K, K, -1).sum(1)
        )

    return {
        "variance": g_var,
        "weights": g_w,
        "inducing": g_Z,
        "means": g_mu,
        "variances": g_S,
    }


def entropy(q: DiagonalGaussianField) -> float:
    """Differential entropy of ``q`` in nats."""
    return 0.5 * float(np.sum(LOG_2PIE + np.log(q.variances)))


def entropy_gradient(q: DiagonalGaussianField) -> np.ndarray:
    """d entropy / d variances (means do not enter)."""
    return 0.5 / q.variances


def kl_to_standard_normal(q: DiagonalGaussianField) -> float:
    """``KL(q || N(0, I))`` in nats."""
    S, mu = q.variances, q.means
    return 0.5 * float(np.sum(S + mu**2 - np.log(S) - 1.0))


def kl_gradient(q: DiagonalGaussianField):
    """Return ``(d KL / d means, d KL / d variances)``."""
    return q.means.copy(), 0.5 * (1.0 - 1.0 / q.variances)
