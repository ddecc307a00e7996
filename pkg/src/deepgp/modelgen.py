"""Sampling from GP hierarchies, mean prediction and evaluation metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .bound import DeepModel, gp_log_marginal, inducing_gram
from .kernels import ArdKernel, LinearKernel, SumKernel, ard_gram_vjp, gram, jitter_cholesky
from .training import NumericalFailure, lbfgs
from .variational import psi_statistics

logger = logging.getLogger(__name__)

#: relative cutoff on ``w_q * Var(input_q)`` below which a dimension is reported as switched off
RELEVANCE_THRESHOLD = 1e-2


# ---------------------------------------------------------------------------
# generative sampling
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """One generative GP mapping; ``kernel=None`` is the zero function."""

    output_dim: int
    kernel: object = None
    noise_variance: float = 1e-3


@dataclass
class HierarchySampler:
    """Layers listed top-down. ``top_inputs`` is a fixed design or ``None`` for N(0, I) draws."""

    layers: list
    top_dim: int = 1
    top_inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.top_inputs is not None:
            self.top_inputs = np.asarray(self.top_inputs, dtype=float)
            if self.top_inputs.ndim == 1:
                self.top_inputs = self.top_inputs[:, None]
            self.top_dim = self.top_inputs.shape[1]
        dim = self.top_dim
        for i, spec in enumerate(self.layers):
            if spec.kernel is not None and spec.kernel.input_dim != dim:
                raise ValueError(f"layer {i}: kernel expects {spec.kernel.input_dim} inputs, layer above has {dim}")
            dim = spec.output_dim


def sample_hierarchy(sampler: HierarchySampler, N: int, seed=0) -> list:
    """Draw every layer of the hierarchy, top first; the last entry is the observed leaf."""
    rng = np.random.default_rng(seed)
    if sampler.top_inputs is not None:
        if sampler.top_inputs.shape[0] != N:
            raise ValueError(f"fixed design has {sampler.top_inputs.shape[0]} rows, asked for {N}")
        X = sampler.top_inputs.copy()
    else:
        X = rng.standard_normal((N, sampler.top_dim))
    out = [X]
    for i, spec in enumerate(sampler.layers):
        F = np.zeros((N, spec.output_dim))
        if spec.kernel is not None:
            L, _ = jitter_cholesky(gram(spec.kernel, X), name=f"sampler layer {i} Gram")
            F = L @ rng.standard_normal((N, spec.output_dim))
        X = F + np.sqrt(spec.noise_variance) * rng.standard_normal((N, spec.output_dim))
        out.append(X)
    return out


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass
class _GroupPredictor:
    columns: np.ndarray
    kernel: ArdKernel
    inducing: np.ndarray
    weights: np.ndarray       # beta * A^-1 psi1^T Y, (K, D_group)

    def __call__(self, X):
        return gram(self.kernel, X, self.inducing) @ self.weights


def _group_predictor(group, q_in, targets):
    psi = psi_statistics(group.kernel, q_in, group.inducing)
    beta = 1.0 / group.noise_variance
    Kmm = inducing_gram(group.kernel, group.inducing)
    L, _ = jitter_cholesky(Kmm + beta * psi.psi2, name="K_MM + beta psi2")
    W = beta * linalg.cho_solve((L, True), psi.psi1.T @ targets)
    return _GroupPredictor(group.columns, group.kernel, group.inducing, W)


def layer_predictors(model: DeepModel) -> list:
    """Sparse posterior-mean predictors per layer (list of group predictors)."""
    preds = []
    for h, layer in enumerate(model.layers):
        q_in = model.layer_inputs(h)
        targets = model.data if h == 0 else layer.q_out.means
        preds.append([_group_predictor(g, q_in, targets[:, g.columns]) for g in layer.groups])
    return preds


def _apply_layer(group_preds, X, out_dim):
    out = np.zeros((X.shape[0], out_dim))
    for gp in group_preds:
        out[:, gp.columns] = gp(X)
    return out


def predict_outputs(model, inputs, source_level=None, target_level=0, predictors=None):
    """Propagate latent means down the hierarchy.

    ``source_level`` is the hidden level the inputs live in (default: the
    parent ``Z``); ``target_level`` 0 means the observed space. A
    :class:`FlatGP` is accepted too, in which case only its predictive mean
    is returned.
    """
    if isinstance(model, FlatGP):
        return model.predict(inputs)
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    source_level = model.depth if source_level is None else source_level
    if not 0 <= target_level <= source_level <= model.depth:
        raise ValueError(f"need 0 <= target ({target_level}) <= source ({source_level}) <= {model.depth}")
    expected = model.latent(source_level).dim if source_level > 0 else model.data.shape[1]
    if X.shape[1] != expected:
        raise ValueError(f"inputs have {X.shape[1]} columns, level {source_level} has {expected}")
    preds = predictors or layer_predictors(model)
    for h in range(source_level - 1, target_level - 1, -1):
        layer = model.layers[h]
        X = _apply_layer(preds[h], X, layer.output_dim)
    return X


@dataclass
class FlatGP:
    """Exact GP regression with an ARD kernel, the single-layer baseline."""

    X: np.ndarray
    Y: np.ndarray
    kernel: ArdKernel
    noise_variance: float

    @classmethod
    def fit(cls, X, Y, max_iter=500, restarts=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(Y, dtype=float)
        Q = X.shape[1]
        var_y = float(np.mean(np.var(Y, 0))) or 1.0
        spread = np.var(X, 0)
        spread[spread == 0] = 1.0
        starts = restarts or [
            (var_y, 1.0 / spread, 0.01 * var_y),
            (var_y, 10.0 / spread, 0.01 * var_y),
            (var_y, 0.1 / spread, 0.1 * var_y),
        ]

        def unpack(theta):
            return ArdKernel(np.exp(theta[0]), np.exp(theta[1:1 + Q])), np.exp(theta[-1])

        def fun(theta):
            try:
                kern, noise = unpack(theta)
                val, dK, dnoise = gp_log_marginal(Y, X, kern, noise, return_grad=True)
            except (linalg.LinAlgError, ValueError, FloatingPointError):
                return np.inf, np.full(theta.size, np.nan)
            dv, dw, _, _ = ard_gram_vjp(kern, X, X, dK)
            g = np.concatenate([[dv * kern.variance], dw * kern.weights, [dnoise * noise]])
            return -val, -g

        best = None
        for v, w, n in starts:
            theta0 = np.concatenate([[np.log(v)], np.log(np.broadcast_to(w, (Q,))), [np.log(n)]])
            try:
                theta, f, *_ = lbfgs(fun, theta0, max_iter, 1e-10, 1e-8)
            except NumericalFailure:
                continue
            if best is None or f < best[1]:
                best = (theta, f)
        if best is None:
            raise NumericalFailure("flat GP hyperparameter fit failed from every start")
        kern, noise = unpack(best[0])
        return cls(X, Y, kern, float(noise))

    def log_marginal(self) -> float:
        return gp_log_marginal(self.Y, self.X, self.kernel, self.noise_variance)

    def predict(self, Xs):
        Xs = np.asarray(Xs, dtype=float)
        if Xs.ndim == 1:
            Xs = Xs[:, None]
        K = gram(self.kernel, self.X) + self.noise_variance * np.eye(self.X.shape[0])
        L, _ = jitter_cholesky(K, name="flat GP K_NN + noise")
        return gram(self.kernel, Xs, self.X) @ linalg.cho_solve((L, True), self.Y)


def mse(pred, truth) -> float:
    """Mean squared error averaged over points and output dimensions."""
    return float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))


# ---------------------------------------------------------------------------
# ARD analysis and latent-space sampling
# ---------------------------------------------------------------------------


@dataclass
class ArdRecord:
    layer: int            # mapping index (0 = leaf mapping)
    group: int
    level: int            # hidden level the mapping reads (layer + 1)
    weights: np.ndarray
    scaled: np.ndarray    # w_q * Var(input_q)
    normalized: np.ndarray
    relevant: np.ndarray

    @property
    def relevant_count(self) -> int:
        return int(np.sum(self.relevant))

    @property
    def order(self) -> np.ndarray:
        return np.argsort(-self.scaled, kind="stable")


def input_variance(q) -> np.ndarray:
    """Total variance of each dimension under ``q``: spread of the means plus mean variance."""
    return np.var(q.means, 0) + np.mean(q.variances, 0)


def ard_profile(model: DeepModel, threshold=RELEVANCE_THRESHOLD) -> list:
    """Scale-aware ARD weights and relevance masks for every mapping and group."""
    records = []
    for h, layer in enumerate(model.layers):
        var_in = input_variance(model.layer_inputs(h))
        for m, g in enumerate(layer.groups):
            w = g.kernel.weights
            scaled = w * var_in
            top = scaled.max()
            norm = scaled / top if top > 0 else np.zeros_like(scaled)
            records.append(ArdRecord(h, m, h + 1, w.copy(), scaled, norm, norm >= threshold))
    return records


def relevant_counts(model: DeepModel, threshold=RELEVANCE_THRESHOLD) -> list:
    """Relevant-dimension count per hidden level (level 1 first), union over groups."""
    counts = []
    by_layer = {}
    for rec in ard_profile(model, threshold):
        by_layer.setdefault(rec.layer, np.zeros_like(rec.relevant))
        by_layer[rec.layer] = by_layer[rec.layer] | rec.relevant
    for h in range(model.depth):
        counts.append(int(np.sum(by_layer[h])))
    return counts


def level_relevance(model: DeepModel, level: int, threshold=RELEVANCE_THRESHOLD):
    """Summed scaled ARD weights of the mapping(s) reading ``level`` and its relevance mask."""
    recs = [r for r in ard_profile(model, threshold) if r.level == level]
    scaled = np.sum([r.scaled for r in recs], 0)
    mask = np.any([r.relevant for r in recs], 0)
    return scaled, mask


def dominant_dims(model: DeepModel, level: int, k=2) -> np.ndarray:
    scaled, _ = level_relevance(model, level)
    return np.argsort(-scaled, kind="stable")[:k]


@dataclass
class Perturbation:
    """How to move away from a latent point before propagating it down.

    ``kind`` is ``"grid"`` (evenly spaced values along each chosen dimension in
    turn) or ``"gaussian"``; offsets are in units of the dimension's standard
    deviation under ``q``. ``base_index=None`` starts from the mean latent point.
    """

    kind: str = "grid"
    scale: float = 2.0
    dims: Optional[Sequence[int]] = None
    base_index: Optional[int] = None
    seed: int = 0


def sample_from_layer(model: DeepModel, level: int, perturbation: Perturbation = None, count: int = 10):
    """Generate ``count`` output vectors by perturbing hidden level ``level``."""
    pert = perturbation or Perturbation()
    if not 1 <= level <= model.depth:
        raise ValueError(f"level must be in [1, {model.depth}], got {level}")
    if count == 0:
        return np.zeros((0, model.data.shape[1]))
    q = model.latent(level)
    dims = np.asarray(pert.dims if pert.dims is not None else dominant_dims(model, level), dtype=int)
    _, mask = level_relevance(model, level)
    if np.any(~mask[dims]):
        warnings.warn(
            f"perturbing switched-off dimension(s) {dims[~mask[dims]].tolist()} at level {level}",
            stacklevel=2,
        )
    base = q.means.mean(0) if pert.base_index is None else q.means[pert.base_index]
    std = np.sqrt(input_variance(q))
    X = np.repeat(base[None, :], count, 0)
    if pert.kind == "grid":
        offsets = np.linspace(-pert.scale, pert.scale, count) if count > 1 else np.zeros(1)
        for i in range(count):
            d = dims[i % dims.size]
            X[i, d] += offsets[i] * std[d]
    elif pert.kind == "gaussian":
        rng = np.random.default_rng(pert.seed)
        X[:, dims] += pert.scale * std[dims] * rng.standard_normal((count, dims.size))
    else:
        raise ValueError(f"unknown perturbation kind {pert.kind!r}")
    return predict_outputs(model, X, source_level=level, target_level=0)


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------


def nn_error(latents, labels, dims=None) -> int:
    """Leave-one-out 1-NN label mismatches; equal distances go to the lowest index."""
    X = np.asarray(latents, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if dims is not None:
        dims = np.asarray(dims)
        X = X[:, dims] if dims.dtype != bool else X[:, dims]
    labels = np.asarray(labels)
    N = X.shape[0]
    if N < 2:
        raise ValueError("nearest-neighbour error needs at least two points")
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, -1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, 1)       # argmin returns the first (lowest) index among ties
    return int(np.sum(labels[nn] != labels))


@dataclass
class ExperimentMetrics:
    records: list = field(default_factory=list)

    def add(self, **rec):
        if "test_mse" in rec and rec["test_mse"] is not None and rec["test_mse"] < 0:
            raise ValueError("MSE cannot be negative")
        self.records.append(rec)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def toy_hierarchy_sampler(noise=1e-3) -> HierarchySampler:
    """Default 1-D -> 2-D -> 10-D generator."""
    rbf = lambda q: ArdKernel(1.0, np.ones(q))
    return HierarchySampler(
        [LayerSpec(2, rbf(1), noise), LayerSpec(10, rbf(2), noise)],
        top_dim=1,
    )


def toy_hierarchy_data(seed=0, N=100, noise=1e-3):
    """Sample ``(Y, truth)``; ``truth`` lists the top and middle layers."""
    layers = sample_hierarchy(toy_hierarchy_sampler(noise), N, seed)
    return layers[-1], layers[:-1]


TOY_REGRESSION_N = 120
TOY_REGRESSION_TRAIN = 25


def toy_regression_data(seed=0, N=TOY_REGRESSION_N, n_train=TOY_REGRESSION_TRAIN, noise=1e-2):
    """Warped-process regression data.

    Equally spaced inputs pass through a GP with linear plus exponentiated
    quadratic covariance to give a 1-D warp; a second exponentiated
    quadratic GP maps the warp to 10 outputs. Returns a dict with
    ``inputs``, ``warp``, ``outputs`` and a boolean ``train`` mask.
    """
    t = np.linspace(-1.0, 1.0, N)[:, None]
    first = SumKernel([LinearKernel(1.0), ArdKernel(1.0, [1.0 / 0.3**2])])
    sampler = HierarchySampler(
        [LayerSpec(1, first, 1e-6), LayerSpec(10, ArdKernel(1.0, [1.0 / 0.5**2]), noise)],
        top_inputs=t,
    )
    _, warp, Y = sample_hierarchy(sampler, N, seed)
    rng = np.random.default_rng([seed, 1])
    train = np.zeros(N, dtype=bool)
    train[rng.choice(N, n_train, replace=False)] = True
    return {"inputs": t, "warp": warp, "outputs": Y, "train": train}


def synthetic_digits(seed=0, per_class=50, side=16):
    """Three-cluster image-like data drawn from a two-level GP hierarchy.

    Class centres sit on a triangle in a 2-D parent space; a GP with unit
    lengthscale maps the parent to a curved 6-D intermediate layer and another
    GP maps that to ``side*side`` pixels squashed into [0, 1].
    """
    rng = np.random.default_rng([seed, 2])
    angles = 2 * np.pi * np.arange(3) / 3
    centres = 1.5 * np.c_[np.cos(angles), np.sin(angles)]
    labels = np.repeat(np.arange(3), per_class)
    top = centres[labels] + 0.35 * rng.standard_normal((labels.size, 2))
    sampler = HierarchySampler(
        [
            LayerSpec(6, ArdKernel(1.0, [1.0, 1.0]), 1e-3),
            LayerSpec(side * side, ArdKernel(1.0, np.full(6, 0.5)), 1e-2),
        ],
        top_inputs=top,
    )
    layers = sample_hierarchy(sampler, labels.size, seed)
    pixels = 1.0 / (1.0 + np.exp(-2.0 * layers[-1]))
    return pixels, np.array([0, 1, 6])[labels], layers[:-1]


def load_usps(path, digits=(0, 1, 6), per_class=50, seed=0):
    """Read a label + 256-pixel CSV and subsample ``per_class`` rows per digit.

    Pixels in [-1, 1] are mapped to [0, 1]. A header row is skipped if present.
    """
    raw = np.genfromtxt(path, delimiter=",")
    if raw.ndim == 1:
        raw = raw[None, :]
    raw = raw[~np.all(np.isnan(raw), 1)]
    if np.any(np.isnan(raw[0])):
        raw = raw[1:]
    if raw.shape[1] != 257:
        raise ValueError(f"{path}: expected label + 256 pixel columns, found {raw.shape[1]} columns")
    labels = raw[:, 0].astype(int)
    pixels = raw[:, 1:]
    if pixels.min() < 0:
        pixels = (pixels + 1.0) / 2.0
    rng = np.random.default_rng(seed)
    keep = []
    for d in digits:
        idx = np.flatnonzero(labels == d)
        if idx.size < per_class:
            raise ValueError(f"{path}: only {idx.size} examples of digit {d}, need {per_class}")
        keep.append(np.sort(rng.choice(idx, per_class, replace=False)))
    keep = np.concatenate(keep)
    return pixels[keep], labels[keep]
