"""End-to-end experiment protocols shared by the CLI and the acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bound import DeepModel
from .modelgen import (
    FlatGP,
    layer_predictors,
    level_relevance,
    mse,
    nn_error,
    predict_outputs,
    relevant_counts,
    synthetic_digits,
    toy_hierarchy_data,
    toy_regression_data,
)
from .kernels import ArdKernel, gram, jitter_cholesky
from .training import OptimizerConfig, OptimizeResult, greedy_init, optimize, optimize_restarts
from .variational import DiagonalGaussianField

logger = logging.getLogger(__name__)

FIXED_INPUT_VARIANCE = 1e-6
REGRESSION_RESTARTS = 13       # one PCA start plus twelve prior draws
SCREEN_ITERATIONS = 200


def derive_seeds(master_seed: int, count: int) -> list:
    """Per-repetition seeds from a master seed and a fixed counter."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(count)]


def center(Y):
    offset = Y.mean(0)
    return Y - offset, offset


def fit_unsupervised(Y, layer_dims, num_inducing, config: OptimizerConfig, restarts=1, seed=0, workers=1):
    """Greedy initialisation plus optimisation, best of ``restarts`` seeds."""
    seeds = [seed + r for r in range(restarts)]
    make = _UnsupervisedFactory(np.asarray(Y, dtype=float), list(layer_dims), num_inducing)
    return optimize_restarts(make, config, seeds, workers)


@dataclass
class _UnsupervisedFactory:
    Y: np.ndarray
    layer_dims: list
    num_inducing: object

    def __call__(self, seed):
        return greedy_init(self.Y, self.layer_dims, self.num_inducing, seed=seed)


def regression_model(X, Y, hidden_dims, num_inducing, seed=0, start="pca") -> DeepModel:
    """Deep GP whose parent layer is pinned to observed inputs ``X``.

    ``hidden_dims`` lists the latent layers between outputs and inputs
    (closest to the outputs first). Train it with ``"parent"`` in
    ``OptimizerConfig.always_frozen``.

    ``start="pca"`` keeps the greedy PCA means for the hidden layers;
    ``start="prior"`` replaces them, top down, with a draw from a unit
    exponentiated quadratic GP on the layer above (standardised), which
    gives smooth warps of the inputs as starting points.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    dims = list(hidden_dims) + [X.shape[1]]
    model = greedy_init(Y, dims, num_inducing, seed=seed)
    Xs = (X - X.mean(0)) / X.std(0)
    model.q_parent = DiagonalGaussianField(Xs, np.full(Xs.shape, FIXED_INPUT_VARIANCE))
    rng = np.random.default_rng([seed, 3])
    if start == "prior":
        above = Xs
        for h in range(model.depth - 1, 0, -1):
            q = model.layers[h].q_out
            L, _ = jitter_cholesky(gram(ArdKernel(1.0, np.ones(above.shape[1])), above), name="prior draw")
            draw = L @ rng.standard_normal(q.shape)
            draw = (draw - draw.mean(0)) / draw.std(0)
            model.layers[h].q_out = DiagonalGaussianField(draw, q.variances.copy())
            above = draw
    elif start != "pca":
        raise ValueError(f"unknown start {start!r}")
    for h in range(model.depth):
        q_in = model.layer_inputs(h)
        for g in model.layers[h].groups:
            g.inducing = q_in.means[np.sort(rng.choice(q_in.num_data, g.num_inducing, replace=False))].copy()
    model.validate()
    return model


@dataclass
class RegressionFactory:
    """Restart factory: the first seed starts from PCA, later seeds from prior draws."""

    X: np.ndarray
    Y: np.ndarray
    hidden_dims: list
    num_inducing: object
    first_seed: int = 0

    def __call__(self, seed):
        start = "pca" if seed == self.first_seed else "prior"
        return regression_model(self.X, self.Y, self.hidden_dims, self.num_inducing, seed=seed, start=start)


def fit_regression(X, Y, hidden_dims, num_inducing, config: OptimizerConfig, restarts=REGRESSION_RESTARTS,
                   seed=0, workers=1, screen_iterations=SCREEN_ITERATIONS):
    """Screened multi-start fit of a regression deep GP; selection by bound only."""
    make = RegressionFactory(np.asarray(X, dtype=float), np.asarray(Y, dtype=float), list(hidden_dims),
                             num_inducing, seed)
    return optimize_restarts(make, config, [seed + r for r in range(restarts)], workers, screen_iterations)


def regression_input_transform(X_train):
    X_train = np.asarray(X_train, dtype=float)
    if X_train.ndim == 1:
        X_train = X_train[:, None]
    mu, sd = X_train.mean(0), X_train.std(0)
    return lambda X: (np.atleast_2d(np.asarray(X, dtype=float).reshape(-1, X_train.shape[1])) - mu) / sd


# ---------------------------------------------------------------------------
# toy hierarchy recovery
# ---------------------------------------------------------------------------

TOY_HIERARCHY_DIMS = [5, 3]
TOY_HIERARCHY_TRUE_COUNTS = [2, 1]
TOY_HIERARCHY_RESTARTS = 3


def run_toy_hierarchy(seed, layer_dims=None, num_inducing=15, config=None, restarts=TOY_HIERARCHY_RESTARTS,
                      workers=1):
    """Generate the 1-D -> 2-D -> 10-D toy data and fit a two-hidden-layer deep GP."""
    Y, truth = toy_hierarchy_data(seed)
    Yc, _ = center(Y)
    config = config or OptimizerConfig(max_iterations=3000, seed=seed)
    res = fit_unsupervised(Yc, layer_dims or TOY_HIERARCHY_DIMS, num_inducing, config, restarts, seed, workers)
    counts = relevant_counts(res.model)
    return {
        "seed": seed,
        "result": res,
        "truth": truth,
        "data": Y,
        "relevant_counts": counts,
        "recovered": counts == TOY_HIERARCHY_TRUE_COUNTS,
    }


# ---------------------------------------------------------------------------
# toy regression
# ---------------------------------------------------------------------------


def run_toy_regression(seed, hidden=((1,), (1, 1)), num_inducing=20, config=None, restarts=REGRESSION_RESTARTS,
                       workers=1):
    """One repetition: fresh warped-process sample and split; flat GP vs deep GPs."""
    data = toy_regression_data(seed)
    tr = data["train"]
    X, Y = data["inputs"], data["outputs"]
    Ytr, offset = center(Y[tr])
    flat = FlatGP.fit(X[tr], Ytr)
    out = {"seed": seed, "flat_mse": mse(flat.predict(X[~tr]) + offset, Y[~tr]), "deep": {}, "split": tr}
    out["flat_log_marginal"] = flat.log_marginal()
    config = config or OptimizerConfig(max_iterations=3000, always_frozen=("parent",), seed=seed)
    transform = regression_input_transform(X[tr])
    for dims in hidden:
        res = fit_regression(X[tr], Ytr, dims, min(num_inducing, int(tr.sum())), config, restarts, seed, workers)
        pred = predict_outputs(res.model, transform(X[~tr])) + offset
        out["deep"][len(dims)] = {
            "mse": mse(pred, Y[~tr]),
            "bound": res.report.total,
            "result": res,
        }
    return out


# ---------------------------------------------------------------------------
# digits depth study
# ---------------------------------------------------------------------------

DIGITS_DIMS = [10, 8, 6, 4, 2]


def top_nn_error(model: DeepModel, labels) -> int:
    """1-NN errors in the parent layer, restricted to its ARD-relevant dimensions."""
    _, mask = level_relevance(model, model.depth)
    return nn_error(model.q_parent.means, labels, np.flatnonzero(mask))


def run_depth_study(Y, labels, depths=(1, 2), dims=None, num_inducing=25, config=None, restarts=1, seed=0, workers=1):
    """Train one model per depth; report per-datapoint bounds and top-layer NN errors."""
    dims = dims or DIGITS_DIMS
    Yc, _ = center(np.asarray(Y, dtype=float))
    config = config or OptimizerConfig(max_iterations=600, seed=seed)
    rows = []
    for H in depths:
        res = fit_unsupervised(Yc, dims[:H], num_inducing, config, restarts, seed, workers)
        rows.append(
            {
                "depth": H,
                "bound": res.report.total,
                "bound_per_datapoint": res.report.per_datapoint,
                "nn_errors": top_nn_error(res.model, labels),
                "relevant_counts": relevant_counts(res.model),
                "status": res.status,
                "result": res,
            }
        )
    return rows
