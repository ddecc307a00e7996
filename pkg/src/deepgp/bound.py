"""Collapsed variational lower bound for deep GP hierarchies.

A :class:`DeepModel` is a stack of layers ordered from the leaf (which
generates the observed data) to the top. ``layers[h]`` maps the latent
layer above it onto its own outputs; the inputs of the top layer are the
parent latent variables ``Z`` with prior ``N(0, I)``. Each layer can be
split horizontally into groups of output columns, each group being an
independent GP mapping with its own kernel, inducing inputs and noise.

The bound is

    F = sum_m g_Y^(m) + sum_h sum_m r_h^(m) + sum_h H[q(X_h)] - KL(q(Z) || p(Z))

where every group term has the free-form ``q(U)`` eliminated at its optimum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .kernels import ArdKernel, JitterError, ard_gram_vjp, gram, jitter_cholesky
from .variational import (
    DiagonalGaussianField,
    entropy,
    entropy_gradient,
    kl_gradient,
    kl_to_standard_normal,
    psi_gradients,
    psi_statistics,
)

LOG_2PI = np.log(2.0 * np.pi)
# Fixed jitter on K_MM relative to the kernel variance. It is part of the
# objective (and its gradient), so the bound stays a bound: the inducing
# variables simply carry a tiny independent noise. Without it the optimiser
# can push K_MM towards singularity and exploit roundoff in tr(K_MM^-1 psi2).
KMM_JITTER = 1e-6


class BoundError(RuntimeError):
    """A bound term could not be evaluated; the message names the layer/group."""


@dataclass
class GroupMapping:
    """One GP mapping onto a subset of a layer's output columns."""

    columns: np.ndarray
    kernel: ArdKernel
    inducing: np.ndarray
    noise_variance: float

    def __post_init__(self):
        self.columns = np.atleast_1d(np.asarray(self.columns, dtype=int))
        self.inducing = np.atleast_2d(np.asarray(self.inducing, dtype=float))
        self.noise_variance = float(self.noise_variance)
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")
        if self.inducing.shape[1] != self.kernel.input_dim:
            raise ValueError(
                f"inducing inputs have {self.inducing.shape[1]} columns, "
                f"kernel expects {self.kernel.input_dim}"
            )

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]

    def copy(self) -> "GroupMapping":
        return GroupMapping(
            self.columns.copy(), self.kernel.copy(), self.inducing.copy(), self.noise_variance
        )


@dataclass
class LayerState:
    """All GP mappings that generate one layer, plus ``q`` over its outputs.

    ``q_out`` is ``None`` for the leaf layer, whose outputs are observed.
    """

    groups: list
    q_out: Optional[DiagonalGaussianField] = None

    @classmethod
    def single(cls, kernel, inducing, noise_variance, output_dim, q_out=None):
        return cls([GroupMapping(np.arange(output_dim), kernel, inducing, noise_variance)], q_out)

    @property
    def input_dim(self) -> int:
        return self.groups[0].kernel.input_dim

    @property
    def output_dim(self) -> int:
        return sum(g.columns.size for g in self.groups)

    def copy(self) -> "LayerState":
        return LayerState([g.copy() for g in self.groups], None if self.q_out is None else self.q_out.copy())


@dataclass
class DeepModel:
    data: np.ndarray
    layers: list
    q_parent: DiagonalGaussianField

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        self.validate()

    @property
    def depth(self) -> int:
        """Number of hidden layers including the parent ``Z``."""
        return len(self.layers)

    @property
    def num_data(self) -> int:
        return self.data.shape[0]

    def layer_inputs(self, h: int) -> DiagonalGaussianField:
        return self.q_parent if h == self.depth - 1 else self.layers[h + 1].q_out

    def latent(self, level: int) -> DiagonalGaussianField:
        """``q`` of hidden level ``level`` (1 = closest to the data, depth = Z)."""
        return self.layer_inputs(level - 1)

    def validate(self):
        N, D = self.data.shape
        if not self.layers:
            raise ValueError("a deep model needs at least one layer")
        if self.layers[0].q_out is not None:
            raise ValueError("the leaf layer must not carry q_out")
        for h, layer in enumerate(self.layers):
            out_dim = D if h == 0 else layer.q_out.dim if layer.q_out is not None else None
            if h > 0 and layer.q_out is None:
                raise ValueError(f"layer {h} is missing its output distribution")
            cols = np.concatenate([g.columns for g in layer.groups])
            if sorted(cols.tolist()) != list(range(out_dim)):
                raise ValueError(f"layer {h}: groups must partition the {out_dim} output columns")
            q_in = self.layer_inputs(h)
            if q_in.num_data != N:
                raise ValueError(f"layer {h}: input distribution has {q_in.num_data} rows, data has {N}")
            for m, g in enumerate(layer.groups):
                if g.kernel.input_dim != q_in.dim:
                    raise ValueError(
                        f"layer {h} group {m}: kernel expects {g.kernel.input_dim} inputs, "
                        f"layer above has {q_in.dim}"
                    )

    def copy(self) -> "DeepModel":
        return DeepModel(self.data.copy(), [l.copy() for l in self.layers], self.q_parent.copy())


@dataclass
class BoundReport:
    total: float
    leaf_terms: list
    mid_terms: list          # one list of group terms per layer above the leaf
    entropies: list          # one entry per hidden layer below Z
    kl_parent: float
    num_data: int = 1

    @property
    def per_datapoint(self) -> float:
        return self.total / self.num_data

    def parts_sum(self) -> float:
        return (
            float(np.sum(self.leaf_terms))
            + float(sum(np.sum(m) for m in self.mid_terms))
            + float(np.sum(self.entropies))
            - self.kl_parent
        )

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "per_datapoint": self.per_datapoint,
            "leaf_terms": list(map(float, self.leaf_terms)),
            "mid_terms": [list(map(float, m)) for m in self.mid_terms],
            "entropies": list(map(float, self.entropies)),
            "kl_parent": float(self.kl_parent),
        }


# ---------------------------------------------------------------------------
# exact GP marginal likelihood
# ---------------------------------------------------------------------------


def gp_log_marginal(Y, X, kernel, noise_variance, return_grad=False):
    """``sum_d log N(y_d | 0, K_XX + noise * I)``; O(N^3).

    With ``return_grad`` also returns ``dL/dK`` (N x N) and ``dL/dnoise``.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N, D = Y.shape
    if X.shape[0] != N:
        raise ValueError(f"Y has {N} rows but X has {X.shape[0]}")
    Kxx = gram(kernel, X) + noise_variance * np.eye(N)
    L, _ = jitter_cholesky(Kxx, name="K_NN + noise")
    alpha = linalg.cho_solve((L, True), Y)
    val = -0.5 * np.sum(Y * alpha) - D * np.sum(np.log(np.diag(L))) - 0.5 * N * D * LOG_2PI
    if not return_grad:
        return float(val)
    Kinv = linalg.cho_solve((L, True), np.eye(N))
    dK = 0.5 * (alpha @ alpha.T - D * Kinv)
    return float(val), dK, float(np.trace(dK))


# ---------------------------------------------------------------------------
# collapsed group term
# ---------------------------------------------------------------------------


@dataclass
class _TermGrads:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray
    Kmm: np.ndarray
    beta: float
    Y: np.ndarray
    extra_trace: float


def _collapsed_term(Y, extra_trace, psi0, psi1, psi2, Kmm, beta, name, want_grad=True):
    """Collapsed bound for one group of outputs.

    ``Y`` (N x D) enters through ``Y^T Y`` and ``psi1^T Y`` only; ``extra_trace``
    adds to ``tr(Y^T Y)`` (the summed output variances of a latent layer).
    """
    N, D = Y.shape
    Kdim = Kmm.shape[0]
    try:
        Lm, _ = jitter_cholesky(Kmm, name=f"{name}: K_MM")
    except JitterError as exc:
        raise BoundError(str(exc)) from exc
    tmp = linalg.solve_triangular(Lm, psi2, lower=True)
    Phi = linalg.solve_triangular(Lm, tmp.T, lower=True)     # Lm^-1 psi2 Lm^-T
    Phi = 0.5 * (Phi + Phi.T)
    Bm = np.eye(Kdim) + beta * Phi
    try:
        LB, _ = jitter_cholesky(Bm, name=f"{name}: I + beta Lm^-1 psi2 Lm^-T")
    except JitterError as exc:
        raise BoundError(str(exc)) from exc
    logdetB = 2.0 * np.sum(np.log(np.diag(LB)))
    P = psi1.T @ Y                                            # (K, D)
    c = linalg.solve_triangular(LB, linalg.solve_triangular(Lm, P, lower=True), lower=True)
    yy = float(np.sum(Y * Y)) + extra_trace
    trPhi = float(np.trace(Phi))
    cc = float(np.sum(c * c))
    val = (
        -0.5 * N * D * LOG_2PI
        + 0.5 * N * D * np.log(beta)
        - 0.5 * D * logdetB
        - 0.5 * beta * yy
        + 0.5 * beta**2 * cc
        - 0.5 * D * beta * psi0
        + 0.5 * D * beta * trPhi
    )
    if not want_grad:
        return val, None

    LmInv = linalg.solve_triangular(Lm, np.eye(Kdim), lower=True)
    R = linalg.solve_triangular(LB, LmInv, lower=True)       # A^-1 = R^T R
    Ainv = R.T @ R
    Kinv = LmInv.T @ LmInv
    C = R.T @ c                                               # A^-1 psi1^T Y
    dA = -0.5 * D * Ainv - 0.5 * beta**2 * (C @ C.T)
    dKmm = 0.5 * D * Kinv - 0.5 * D * beta * (Kinv @ psi2 @ Kinv) + dA
    dpsi2 = 0.5 * D * beta * Kinv + beta * dA
    dpsi1 = beta**2 * (Y @ C.T)
    dY = -beta * Y + beta**2 * (psi1 @ C)
    dbeta = (
        0.5 * N * D / beta
        - 0.5 * yy
        + beta * cc
        + float(np.sum(dA * psi2))
        - 0.5 * D * psi0
        + 0.5 * D * trPhi
    )
    sym = lambda M: 0.5 * (M + M.T)
    return val, _TermGrads(
        psi0=-0.5 * D * beta,
        psi1=dpsi1,
        psi2=sym(dpsi2),
        Kmm=sym(dKmm),
        beta=dbeta,
        Y=dY,
        extra_trace=-0.5 * beta,
    )


def inducing_gram(kernel, Z):
    """``K_MM`` including the fixed relative jitter."""
    return gram(kernel, Z) + KMM_JITTER * kernel.variance * np.eye(Z.shape[0])


def _group_term(Y, extra_trace, q_in, group, name, want_grad):
    kern = group.kernel
    psi = psi_statistics(kern, q_in, group.inducing)
    Kmm = inducing_gram(kern, group.inducing)
    beta = 1.0 / group.noise_variance
    val, g = _collapsed_term(Y, extra_trace, psi.psi0, psi.psi1, psi.psi2, Kmm, beta, name, want_grad)
    if not np.isfinite(val):
        raise BoundError(f"{name}: non-finite bound term ({val})")
    if not want_grad:
        return val, None
    pg = psi_gradients(kern, q_in, group.inducing, g.psi0, g.psi1, g.psi2)
    kv, kw, kZ, _ = ard_gram_vjp(kern, group.inducing, group.inducing, g.Kmm)
    kv += KMM_JITTER * np.trace(g.Kmm)
    grads = {
        "kernel_variance": pg["variance"] + kv,
        "ard_weights": pg["weights"] + kw,
        "inducing": pg["inducing"] + kZ,
        "noise_variance": -beta**2 * g.beta,
        "in_means": pg["means"],
        "in_variances": pg["variances"],
        "Y": g.Y,
        "extra_trace": g.extra_trace,
    }
    return val, grads


def leaf_term(Y, q_in: DiagonalGaussianField, group: GroupMapping, name="leaf") -> float:
    """Collapsed ``g_Y`` for observed columns ``Y`` generated from ``q_in``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return float(_group_term(Y, 0.0, q_in, group, name, False)[0])


def mid_term(q_out: DiagonalGaussianField, q_in: DiagonalGaussianField, group: GroupMapping, name="mid") -> float:
    """Collapsed ``r_X`` for latent outputs ``q_out`` generated from ``q_in``.

    ``<X X^T>`` only enters through its trace, so this equals the leaf term
    with ``Y := q_out.means`` minus ``sum(q_out.variances) / (2 noise)``.
    """
    return float(
        _group_term(q_out.means, float(np.sum(q_out.variances)), q_in, group, name, False)[0]
    )


# ---------------------------------------------------------------------------
# whole-model bound and gradients
# ---------------------------------------------------------------------------


def _zeros_like_model(model):
    layers = []
    for layer in model.layers:
        groups = [
            {
                "kernel_variance": 0.0,
                "ard_weights": np.zeros_like(g.kernel.weights),
                "inducing": np.zeros_like(g.inducing),
                "noise_variance": 0.0,
            }
            for g in layer.groups
        ]
        q = None
        if layer.q_out is not None:
            q = {"means": np.zeros_like(layer.q_out.means), "variances": np.zeros_like(layer.q_out.variances)}
        layers.append({"groups": groups, "q_out": q})
    parent = {"means": np.zeros_like(model.q_parent.means), "variances": np.zeros_like(model.q_parent.variances)}
    return {"layers": layers, "parent": parent}


def _evaluate(model: DeepModel, want_grad: bool):
    grads = _zeros_like_model(model) if want_grad else None
    leaf_terms, mid_terms, entropies = [], [], []
    for h, layer in enumerate(model.layers):
        q_in = model.layer_inputs(h)
        terms = []
        for m, group in enumerate(layer.groups):
            name = f"layer {h} group {m}"
            cols = group.columns
            if h == 0:
                Y, extra = model.data[:, cols], 0.0
            else:
                Y = layer.q_out.means[:, cols]
                extra = float(np.sum(layer.q_out.variances[:, cols]))
            val, g = _group_term(Y, extra, q_in, group, name, want_grad)
            terms.append(val)
            if want_grad:
                gg = grads["layers"][h]["groups"][m]
                for key in ("kernel_variance", "ard_weights", "inducing", "noise_variance"):
                    gg[key] = gg[key] + g[key]
                gin = grads["parent"] if h == model.depth - 1 else grads["layers"][h + 1]["q_out"]
                gin["means"] += g["in_means"]
                gin["variances"] += g["in_variances"]
                if h > 0:
                    gout = grads["layers"][h]["q_out"]
                    gout["means"][:, cols] += g["Y"]
                    gout["variances"][:, cols] += g["extra_trace"]
        if h == 0:
            leaf_terms = terms
        else:
            mid_terms.append(terms)
            entropies.append(entropy(layer.q_out))
            if want_grad:
                grads["layers"][h]["q_out"]["variances"] += entropy_gradient(layer.q_out)
    kl = kl_to_standard_normal(model.q_parent)
    if want_grad:
        gm, gs = kl_gradient(model.q_parent)
        grads["parent"]["means"] -= gm
        grads["parent"]["variances"] -= gs
    total = float(np.sum(leaf_terms) + sum(np.sum(t) for t in mid_terms) + np.sum(entropies) - kl)
    report = BoundReport(total, leaf_terms, mid_terms, entropies, kl, model.num_data)
    return report, grads


def evidence_lower_bound(model: DeepModel) -> BoundReport:
    """Evaluate the bound and its per-term decomposition."""
    return _evaluate(model, False)[0]


def bound_gradients(model: DeepModel):
    """Gradients of the bound with respect to every model and variational parameter.

    Returns a nested dict mirroring the model::

        {"layers": [{"groups": [{"kernel_variance", "ard_weights", "inducing",
                                  "noise_variance"}, ...],
                     "q_out": {"means", "variances"} or None}, ...],
         "parent": {"means", "variances"}}

    Gradients are with respect to the natural (untransformed) parameters.
    """
    return _evaluate(model, True)[1]


def bound_and_gradients(model: DeepModel):
    return _evaluate(model, True)
