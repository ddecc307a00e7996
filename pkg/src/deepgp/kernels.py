"""Covariance functions, Gram matrices and their analytic gradients.

The ARD kernel stores its relevance weights directly as inverse squared
lengthscales ``w_q``:

    k(x, x') = variance * exp(-0.5 * sum_q w_q (x_q - x'_q)^2)

so a weight of zero removes all dependence on that input dimension.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

#: Largest multiple of ``mean(diag K)`` that :func:`jitter_cholesky` will add.
MAX_RELATIVE_JITTER = 1e-1


class JitterError(linalg.LinAlgError):
    """Raised when a matrix cannot be factorised even with maximal jitter."""


@dataclass
class ArdKernel:
    """Exponentiated quadratic kernel with one relevance weight per input."""

    variance: float
    weights: np.ndarray

    def __post_init__(self):
        self.variance = float(self.variance)
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if self.weights.ndim != 1:
            raise ValueError("ARD weights must be a vector")
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("ARD weights must be finite and non-negative")

    @property
    def input_dim(self) -> int:
        return self.weights.size

    @property
    def lengthscales(self) -> np.ndarray:
        """Display-only conversion ``1/sqrt(w)`` (infinite for switched-off dims)."""
        with np.errstate(divide="ignore"):
            return 1.0 / np.sqrt(self.weights)

    @classmethod
    def from_lengthscales(cls, variance, lengthscales):
        return cls(variance, 1.0 / np.square(np.atleast_1d(lengthscales)))

    def copy(self) -> "ArdKernel":
        return ArdKernel(self.variance, self.weights.copy())


@dataclass
class LinearKernel:
    """``k(x, x') = variance * x . x'``; used only for data generation."""

    variance: float
    input_dim: int = 1

    def __post_init__(self):
        self.variance = float(self.variance)
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")


@dataclass
class SumKernel:
    parts: list = field(default_factory=list)

    def __post_init__(self):
        if not self.parts:
            raise ValueError("SumKernel needs at least one part")
        dims = {p.input_dim for p in self.parts}
        if len(dims) != 1:
            raise ValueError(f"SumKernel parts disagree on input dimension: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.parts[0].input_dim


def _check_inputs(kernel, A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"input column counts differ: {A.shape[1]} vs {B.shape[1]}")
    if A.shape[1] != kernel.input_dim:
        raise ValueError(
            f"inputs have {A.shape[1]} columns but kernel expects {kernel.input_dim}"
        )
    return A, B


def scaled_sqdist(A, B, weights):
    """Pairwise ``sum_q w_q (a_q - b_q)^2``, clipped at zero."""
    sw = np.sqrt(weights)
    As, Bs = A * sw, B * sw
    d2 = (
        np.sum(As**2, 1)[:, None]
        + np.sum(Bs**2, 1)[None, :]
        - 2.0 * As @ Bs.T
    )
    return np.maximum(d2, 0.0)


def gram(kernel, A, B=None) -> np.ndarray:
    """Evaluate ``k(a_n, b_m)`` for every row pair; ``B=None`` means ``B = A``."""
    same = B is None or B is A
    A, B = _check_inputs(kernel, A, B)
    if isinstance(kernel, ArdKernel):
        if same:
            # exact pairwise differences keep the diagonal at exactly `variance`
            diff = A[:, None, :] - A[None, :, :]
            d2 = np.einsum("nmq,q->nm", diff**2, kernel.weights)
        else:
            d2 = scaled_sqdist(A, B, kernel.weights)
        return kernel.variance * np.exp(-0.5 * d2)
    if isinstance(kernel, LinearKernel):
        return kernel.variance * (A @ B.T)
    if isinstance(kernel, SumKernel):
        return sum(gram(p, A, None if same else B) for p in kernel.parts)
    raise TypeError(f"unsupported kernel {type(kernel).__name__}")


def kdiag(kernel, A) -> np.ndarray:
    A, _ = _check_inputs(kernel, A, None)
    if isinstance(kernel, ArdKernel):
        return np.full(A.shape[0], kernel.variance)
    if isinstance(kernel, LinearKernel):
        return kernel.variance * np.sum(A**2, 1)
    if isinstance(kernel, SumKernel):
        return sum(kdiag(p, A) for p in kernel.parts)
    raise TypeError(f"unsupported kernel {type(kernel).__name__}")


def gram_gradients(kernel, A, B=None) -> dict:
    """Full derivative tensors of ``gram(kernel, A, B)``.

    Returns a dict with ``"inputs"`` of shape ``(N, M, Q)`` holding
    ``dK[n, m] / dA[n, q]`` and one entry per hyperparameter. For an
    :class:`ArdKernel` those are ``"variance"`` ``(N, M)`` and ``"weights"``
    ``(Q, N, M)``. A :class:`SumKernel` returns ``"parts"``, a list of the
    per-part hyperparameter dicts, next to the summed ``"inputs"``.
    """
    A, B = _check_inputs(kernel, A, B)
    if isinstance(kernel, ArdKernel):
        K = gram(kernel, A, B)
        diff = A[:, None, :] - B[None, :, :]
        return {
            "variance": K / kernel.variance,
            "weights": np.moveaxis(-0.5 * diff**2 * K[:, :, None], 2, 0),
            "inputs": -kernel.weights * diff * K[:, :, None],
        }
    if isinstance(kernel, LinearKernel):
        return {
            "variance": A @ B.T,
            "inputs": np.broadcast_to(kernel.variance * B[None, :, :], (A.shape[0],) + B.shape).copy(),
        }
    if isinstance(kernel, SumKernel):
        parts = [gram_gradients(p, A, B) for p in kernel.parts]
        return {
            "parts": [{k: v for k, v in g.items() if k != "inputs"} for g in parts],
            "inputs": sum(g["inputs"] for g in parts),
        }
    raise TypeError(f"unsupported kernel {type(kernel).__name__}")


def ard_gram_vjp(kernel: ArdKernel, A, B, G, K=None):
    """Contract ``G`` (N x M) with the derivatives of an ARD Gram matrix.

    Returns ``(d_variance, d_weights, d_A, d_B)``, i.e. the gradients of
    ``sum(G * gram(kernel, A, B))``. Pass ``B is A`` to get the combined
    input gradient in ``d_A`` (``d_B`` is then ``None``).
    """
    same = B is A
    if K is None:
        K = gram(kernel, A, B)
    GK = G * K
    diff = A[:, None, :] - B[None, :, :]
    d_var = np.sum(GK) / kernel.variance
    d_w = -0.5 * np.einsum("nm,nmq->q", GK, diff**2)
    wdiff = kernel.weights * diff
    d_A = -np.einsum("nm,nmq->nq", GK, wdiff)
    d_B = np.einsum("nm,nmq->mq", GK, wdiff)
    if same:
        return d_var, d_w, d_A + d_B, None
    return d_var, d_w, d_A, d_B


def jitter_cholesky(K, name="matrix", max_relative_jitter=MAX_RELATIVE_JITTER):
    """Lower Cholesky factor of ``K + jitter * I``.

    The factorisation is first attempted without jitter; on failure the
    jitter starts at ``1e-6 * mean(diag K)`` and grows by a factor of ten
    until it reaches ``max_relative_jitter * mean(diag K)``.

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    jitter : float
        The jitter actually added (0.0 when none was needed).
    """
    K = np.asarray(K, dtype=float)
    L, info = linalg.lapack.dpotrf(K, lower=1, clean=1)
    if info == 0:
        return L, 0.0
    scale = np.mean(np.diag(K))
    if not np.isfinite(scale) or scale <= 0:
        raise JitterError(f"{name}: non-positive or non-finite diagonal (mean {scale!r})")
    jitter = 1e-6 * scale
    eye = np.eye(K.shape[0])
    while jitter <= max_relative_jitter * scale * (1 + 1e-12):
        L, info = linalg.lapack.dpotrf(K + jitter * eye, lower=1, clean=1)
        if info == 0:
            logger.debug("%s: added jitter %.3e", name, jitter)
            return L, jitter
        jitter *= 10.0
    try:
        cond = np.linalg.cond(K)
    except np.linalg.LinAlgError:
        cond = np.inf
    raise JitterError(
        f"{name} ({K.shape[0]}x{K.shape[0]}) is not positive definite even with "
        f"jitter {max_relative_jitter * scale:.3e}; condition estimate {cond:.3e}"
    )
