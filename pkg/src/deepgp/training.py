"""Parameter packing, greedy initialisation and bound optimisation."""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .bound import (
    BoundError,
    BoundReport,
    DeepModel,
    GroupMapping,
    LayerState,
    bound_and_gradients,
    evidence_lower_bound,
)
from .kernels import ArdKernel, JitterError
from .variational import DiagonalGaussianField

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8

# segment kinds; the log-transformed ones are kept strictly positive
KINDS = ("kernel_variance", "ard_weights", "inducing", "noise_variance", "q_means", "q_variances")
LOG_KINDS = {"kernel_variance", "ard_weights", "noise_variance", "q_variances"}
FLOORED_KINDS = {"noise_variance", "q_variances"}


class NumericalFailure(RuntimeError):
    """No finite bound could be found along the search direction."""


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    kind: str
    scope: str           # "layer<h>" or "parent"
    layer: Optional[int]
    group: Optional[int]
    shape: tuple
    start: int
    stop: int

    @property
    def is_log(self) -> bool:
        return self.kind in LOG_KINDS


class ParameterLayout:
    """Maps a :class:`DeepModel` to a flat vector and back.

    Positive quantities are stored as logs; noise and variational variances
    are floored at ``VARIANCE_FLOOR`` when unpacked.
    """

    def __init__(self, segments):
        self.segments = list(segments)
        self.size = self.segments[-1].stop if self.segments else 0

    @classmethod
    def from_model(cls, model: DeepModel) -> "ParameterLayout":
        segs, pos = [], 0

        def add(name, kind, scope, layer, group, shape):
            nonlocal pos
            n = int(np.prod(shape)) if shape else 1
            segs.append(Segment(name, kind, scope, layer, group, tuple(shape), pos, pos + n))
            pos += n

        for h, layer in enumerate(model.layers):
            for m, g in enumerate(layer.groups):
                pre = f"layer{h}/group{m}"
                add(f"{pre}/kernel_variance", "kernel_variance", f"layer{h}", h, m, ())
                add(f"{pre}/ard_weights", "ard_weights", f"layer{h}", h, m, g.kernel.weights.shape)
                add(f"{pre}/inducing", "inducing", f"layer{h}", h, m, g.inducing.shape)
                add(f"{pre}/noise_variance", "noise_variance", f"layer{h}", h, m, ())
            if layer.q_out is not None:
                add(f"layer{h}/q_means", "q_means", f"layer{h}", h, None, layer.q_out.shape)
                add(f"layer{h}/q_variances", "q_variances", f"layer{h}", h, None, layer.q_out.shape)
        add("parent/q_means", "q_means", "parent", None, None, model.q_parent.shape)
        add("parent/q_variances", "q_variances", "parent", None, None, model.q_parent.shape)
        return cls(segs)

    def to_json(self) -> list:
        return [
            {"name": s.name, "kind": s.kind, "shape": list(s.shape), "start": s.start, "stop": s.stop}
            for s in self.segments
        ]

    def mask(self, selectors) -> np.ndarray:
        """Boolean mask of coordinates whose segment kind, scope or name is selected."""
        sel = set(selectors or ())
        m = np.zeros(self.size, dtype=bool)
        for s in self.segments:
            if s.kind in sel or s.scope in sel or s.name in sel:
                m[s.start:s.stop] = True
        return m

    @staticmethod
    def _natural_values(model, s):
        if s.scope == "parent":
            q = model.q_parent
            return q.means if s.kind == "q_means" else q.variances
        layer = model.layers[s.layer]
        if s.kind == "q_means":
            return layer.q_out.means
        if s.kind == "q_variances":
            return layer.q_out.variances
        g = layer.groups[s.group]
        return {
            "kernel_variance": g.kernel.variance,
            "ard_weights": g.kernel.weights,
            "inducing": g.inducing,
            "noise_variance": g.noise_variance,
        }[s.kind]

    def pack(self, model: DeepModel) -> np.ndarray:
        x = np.empty(self.size)
        for s in self.segments:
            v = np.asarray(self._natural_values(model, s), dtype=float).ravel()
            if s.is_log:
                with np.errstate(divide="ignore"):
                    v = np.log(v)
            x[s.start:s.stop] = v
        return x

    def _transform(self, x, s):
        v = x[s.start:s.stop]
        if s.is_log:
            v = np.exp(v)
            if s.kind in FLOORED_KINDS:
                v = np.maximum(v, VARIANCE_FLOOR)
        return v.reshape(s.shape) if s.shape else float(v[0])

    def unpack(self, x, template: DeepModel) -> DeepModel:
        x = np.asarray(x, dtype=float)
        vals = {s.name: self._transform(x, s) for s in self.segments}
        layers = []
        for h, layer in enumerate(template.layers):
            groups = []
            for m, g in enumerate(layer.groups):
                pre = f"layer{h}/group{m}"
                groups.append(
                    GroupMapping(
                        g.columns.copy(),
                        ArdKernel(vals[f"{pre}/kernel_variance"], vals[f"{pre}/ard_weights"]),
                        vals[f"{pre}/inducing"],
                        vals[f"{pre}/noise_variance"],
                    )
                )
            q = None
            if layer.q_out is not None:
                q = DiagonalGaussianField(vals[f"layer{h}/q_means"], vals[f"layer{h}/q_variances"])
            layers.append(LayerState(groups, q))
        parent = DiagonalGaussianField(vals["parent/q_means"], vals["parent/q_variances"])
        return DeepModel(template.data, layers, parent)

    def pack_gradient(self, grads: dict, x) -> np.ndarray:
        """Chain natural-parameter gradients (from ``bound_gradients``) to packed coordinates."""
        out = np.empty(self.size)
        for s in self.segments:
            if s.scope == "parent":
                g = grads["parent"]["means" if s.kind == "q_means" else "variances"]
            elif s.kind in ("q_means", "q_variances"):
                g = grads["layers"][s.layer]["q_out"]["means" if s.kind == "q_means" else "variances"]
            else:
                g = grads["layers"][s.layer]["groups"][s.group][s.kind]
            g = np.asarray(g, dtype=float).ravel()
            if s.is_log:
                raw = x[s.start:s.stop]
                if s.kind in FLOORED_KINDS:
                    g = np.where(np.exp(raw) > VARIANCE_FLOOR, g * np.exp(raw), 0.0)
                else:
                    g = g * np.exp(raw)
            out[s.start:s.stop] = g
        return out


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: ParameterLayout

    @classmethod
    def from_model(cls, model):
        layout = ParameterLayout.from_model(model)
        return cls(layout.pack(model), layout)

    def to_model(self, template):
        return self.layout.unpack(self.values, template)


class BoundObjective:
    """Negative bound and gradient on the packed vector, with a one-entry cache."""

    def __init__(self, template: DeepModel, layout: Optional[ParameterLayout] = None):
        self.template = template
        self.layout = layout or ParameterLayout.from_model(template)
        self._key = None
        self._value = None

    def evaluate(self, x):
        key = x.tobytes()
        if key != self._key:
            try:
                model = self.layout.unpack(x, self.template)
                report, grads = bound_and_gradients(model)
                g = self.layout.pack_gradient(grads, x)
                if not np.isfinite(report.total) or not np.all(np.isfinite(g)):
                    raise BoundError(f"non-finite bound or gradient (bound {report.total})")
                self._value = (report, g, None)
            except (BoundError, JitterError, ValueError, FloatingPointError) as exc:
                self._value = (None, None, str(exc))
            self._key = key
        return self._value

    def __call__(self, x):
        report, g, err = self.evaluate(x)
        if report is None:
            return np.inf, np.full(x.size, np.nan)
        return -report.total, -g


# ---------------------------------------------------------------------------
# greedy initialisation
# ---------------------------------------------------------------------------


def _pca_scores(X, Q, rng, name):
    Xc = X - X.mean(0)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component is positive
    signs = np.sign(Vt[np.arange(Vt.shape[0]), np.argmax(np.abs(Vt), 1)])
    signs[signs == 0] = 1.0
    U = U * signs
    tol = s[0] * max(X.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    k = min(Q, rank)
    scores = U[:, :k] * s[:k]
    if k < Q:
        warnings.warn(
            f"{name}: requested {Q} dimensions but only rank {rank} is available; "
            f"padding with {Q - k} small random columns",
            stacklevel=3,
        )
        scores = np.hstack([scores, 1e-2 * rng.standard_normal((X.shape[0], Q - k))])
    std = scores.std(0)
    std[std == 0] = 1.0
    return scores / std


def _pick_inducing(means, K, rng):
    uniq = np.unique(means, axis=0)
    if K > uniq.shape[0]:
        idx = rng.choice(means.shape[0], K, replace=False)
        return means[idx] + 1e-6 * rng.standard_normal((K, means.shape[1]))
    idx = rng.choice(uniq.shape[0], K, replace=False)
    return uniq[np.sort(idx)]


def greedy_init(Y, layer_dims, num_inducing, seed=0, groups=None, q_variance=0.5) -> DeepModel:
    """Initialise a deep model by stacking PCA projections.

    Parameters
    ----------
    Y : (N, D) array
        Observations. They are used as given; centre them beforehand.
    layer_dims : list of int
        Hidden dimensionalities from the layer closest to the data up to Z.
    num_inducing : int or list of int
        Inducing points per layer (shared by its groups).
    groups : list, optional
        Per-layer list of column index lists; ``None`` entries mean one group.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N, D = Y.shape
    dims = list(layer_dims)
    if not dims or any(int(q) < 1 for q in dims):
        raise ValueError(f"layer_dims must be non-empty positive integers, got {layer_dims}")
    Ks = [int(num_inducing)] * len(dims) if np.isscalar(num_inducing) else list(num_inducing)
    if len(Ks) != len(dims):
        raise ValueError("num_inducing must give one value per layer")
    if any(k < 1 or k > N for k in Ks):
        raise ValueError(f"inducing counts must lie in [1, {N}], got {Ks}")
    groups = list(groups) if groups is not None else [None] * len(dims)
    rng = np.random.default_rng(seed)

    means = []
    prev = Y
    for h, Q in enumerate(dims):
        prev = _pca_scores(prev, int(Q), rng, f"hidden layer {h + 1}")
        means.append(prev)

    layers = []
    for h in range(len(dims)):
        inputs = means[h]
        out_dim = D if h == 0 else dims[h - 1]
        outputs = Y if h == 0 else means[h - 1]
        partition = groups[h] or [list(range(out_dim))]
        gms = []
        for cols in partition:
            cols = np.asarray(cols, dtype=int)
            noise = 0.01 * float(np.mean(np.var(outputs[:, cols], 0)))
            gms.append(
                GroupMapping(
                    cols,
                    ArdKernel(1.0, np.full(dims[h], 1.0 / dims[h])),
                    _pick_inducing(inputs, Ks[h], rng),
                    max(noise, VARIANCE_FLOOR),
                )
            )
        q_out = None
        if h > 0:
            q_out = DiagonalGaussianField(means[h - 1], np.full(means[h - 1].shape, q_variance))
        layers.append(LayerState(gms, q_out))
    parent = DiagonalGaussianField(means[-1], np.full(means[-1].shape, q_variance))
    return DeepModel(Y, layers, parent)


# ---------------------------------------------------------------------------
# L-BFGS with strong-Wolfe line search
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    max_iterations: int = 1000
    tolerance: float = 1e-7
    gradient_floor: float = 1e-10
    frozen_iterations: int = 50
    frozen_kinds: tuple = ("kernel_variance", "noise_variance")
    always_frozen: tuple = ()
    memory: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 0 or self.frozen_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.frozen_iterations > self.max_iterations:
            raise ValueError("frozen_iterations cannot exceed max_iterations")
        self.frozen_kinds = tuple(self.frozen_kinds)
        self.always_frozen = tuple(self.always_frozen)


@dataclass
class TraceRecord:
    iteration: int
    report: BoundReport
    grad_norm: float
    step_size: float
    phase: int

    def to_json(self) -> str:
        rec = {
            "iteration": self.iteration,
            "phase": self.phase,
            "bound": self.report.total,
            "terms": self.report.as_dict(),
            "grad_norm": self.grad_norm,
            "step_size": self.step_size,
        }
        return json.dumps(rec)


@dataclass
class OptimizeResult:
    model: DeepModel
    trace: list
    status: str            # "converged" | "max_iterations"
    iterations: int

    def __iter__(self):
        yield self.model
        yield self.trace

    @property
    def report(self) -> BoundReport:
        return self.trace[-1].report


def _line_search(phi, f0, d0, alpha, c1=1e-4, c2=0.9, max_evals=40):
    """Strong-Wolfe bracketing/zoom search on ``phi(a) -> (f, df, payload)``.

    Non-finite trial values are treated as overshooting and shrink the
    bracket. Returns ``(a, f, payload, saw_finite)``; ``a`` is ``None`` when
    no point with sufficient decrease was found.
    """
    lo, f_lo, d_lo, p_lo = 0.0, f0, d0, None
    hi, f_hi, d_hi = None, None, None
    saw_finite = False
    a = alpha
    for _ in range(max_evals):
        f, d, payload = phi(a)
        if not (np.isfinite(f) and np.isfinite(d)):
            hi, f_hi, d_hi = a, None, None
        else:
            saw_finite = True
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, payload, True
                if hi is not None and d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                elif hi is None and d >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, p_lo = a, f, d, payload
        if hi is None:
            a = 2.0 * a
            continue
        width = hi - lo
        if abs(width) < 1e-16 * max(1.0, abs(lo)):
            break
        trial = None
        if f_hi is not None:
            # quadratic through (lo, f_lo, d_lo) and (hi, f_hi)
            denom = 2.0 * (f_hi - f_lo - d_lo * width)
            if denom > 0:
                trial = lo - d_lo * width**2 / denom
        a_min, a_max = sorted((lo + 0.1 * width, hi - 0.1 * width))
        if trial is None or not (a_min <= trial <= a_max):
            trial = lo + 0.5 * width
        a = trial
    if lo > 0:
        return lo, f_lo, p_lo, saw_finite
    return None, None, None, saw_finite


def lbfgs(fun, x0, max_iter, ftol, gtol, memory=10, callback=None):
    """Minimise ``fun(x) -> (f, g)`` with limited-memory BFGS.

    ``callback(it, x, f, g, step)`` is called after every accepted step.
    Returns ``(x, f, g, status, iterations)``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalFailure("objective is not finite at the starting point")
    S, Yv = [], []
    it = 0
    stalled = False
    if np.max(np.abs(g), initial=0.0) < gtol:
        return x, f, g, "converged", 0
    while it < max_iter:
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Yv)):
            rho = 1.0 / (y @ s)
            a_ = rho * (s @ q)
            alphas.append((rho, a_))
            q -= a_ * y
        if S:
            q *= (S[-1] @ Yv[-1]) / (Yv[-1] @ Yv[-1])
        for (s, y), (rho, a_) in zip(zip(S, Yv), reversed(alphas)):
            q += s * (a_ - rho * (y @ q))
        p = -q
        d0 = g @ p
        if not d0 < 0:
            S, Yv = [], []
            p, d0 = -g, -(g @ g)
        a0 = 1.0 if S else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))

        def phi(a):
            xn = x + a * p
            fn, gn = fun(xn)
            return fn, gn @ p if np.all(np.isfinite(gn)) else np.nan, (xn, gn)

        a, fn, payload, saw_finite = _line_search(phi, f, d0, a0)
        if a is None and S:
            S, Yv = [], []
            p, d0 = -g, -(g @ g)
            a, fn, payload, saw_finite = _line_search(phi, f, d0, min(1.0, 1.0 / np.linalg.norm(g)))
        if a is None:
            if not saw_finite:
                raise NumericalFailure("no finite objective value along the search direction")
            return x, f, g, "converged", it
        xn, gn = payload
        s, y = xn - x, gn - g
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            S.append(s)
            Yv.append(y)
            if len(S) > memory:
                S.pop(0)
                Yv.pop(0)
        it += 1
        f_old = f
        x, f, g = xn, fn, gn
        if callback is not None:
            callback(it, x, f, g, a)
        if np.max(np.abs(g)) < gtol:
            return x, f, g, "converged", it
        if abs(f_old - f) <= ftol * max(1.0, abs(f)):
            # a stale curvature history can yield tiny steps far from a
            # stationary point; only stop if a fresh start stalls as well
            if stalled or not S:
                return x, f, g, "converged", it
            S, Yv = [], []
            stalled = True
        else:
            stalled = False
    return x, f, g, "max_iterations", it


def optimize(model: DeepModel, config: OptimizerConfig = None, log_path=None) -> OptimizeResult:
    """Maximise the bound over all free parameters.

    Runs ``config.frozen_iterations`` steps with ``config.frozen_kinds`` held
    fixed, then continues with everything free except ``config.always_frozen``.
    Iterations count across both phases. The returned trace holds one
    record per accepted step (plus the starting point).
    """
    config = config or OptimizerConfig()
    objective = BoundObjective(model)
    layout = objective.layout
    x = layout.pack(model)
    report, g, err = objective.evaluate(x)
    if report is None:
        raise NumericalFailure(f"initial bound is not finite: {err}")

    log = open(log_path, "w") if log_path else None
    trace = [TraceRecord(0, report, float(np.linalg.norm(g)), 0.0, 0)]
    if log:
        log.write(trace[0].to_json() + "\n")

    always = layout.mask(config.always_frozen)
    phases = []
    if config.frozen_iterations > 0 and config.frozen_kinds:
        phases.append((1, always | layout.mask(config.frozen_kinds), config.frozen_iterations))
    phases.append((2, always, config.max_iterations - config.frozen_iterations if phases else config.max_iterations))

    status, total_it = "converged", 0
    try:
        for phase, frozen, budget in phases:
            free = ~frozen
            if not np.any(free):
                continue
            base = x.copy()

            def fun(z):
                xx = base.copy()
                xx[free] = z
                fv, gv = objective(xx)
                return fv, gv[free]

            def callback(it, z, fv, gv, step):
                xx = base.copy()
                xx[free] = z
                rep = objective.evaluate(xx)[0]
                rec = TraceRecord(total_it + it, rep, float(np.linalg.norm(gv)), float(step), phase)
                trace.append(rec)
                if log:
                    log.write(rec.to_json() + "\n")

            z, fv, gv, status, nit = lbfgs(
                fun, x[free], budget, config.tolerance, config.gradient_floor, config.memory, callback
            )
            x = base.copy()
            x[free] = z
            total_it += nit
            if phase == 1 and len(phases) > 1:
                status = "max_iterations"
    finally:
        if log:
            log.close()
    return OptimizeResult(layout.unpack(x, model), trace, status, total_it)


def _restart_job(args):
    make_model, seed, config = args
    model = make_model(seed)
    return optimize(model, config)


def _run_jobs(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_restart_job, jobs))
    return [_restart_job(j) for j in jobs]


def _best(results):
    # ties keep the earliest seed, so the choice does not depend on ``workers``
    return max(range(len(results)), key=lambda i: (results[i].report.total, -i))


def optimize_restarts(
    make_model: Callable, config: OptimizerConfig, seeds, workers: int = 1, screen_iterations: int = 0
) -> OptimizeResult:
    """Optimise one model per seed and keep the best final bound.

    With ``screen_iterations > 0`` every start is first run for that many
    iterations only; the start with the best bound then continues for the
    remaining budget. ``make_model`` must be picklable when ``workers > 1``.
    """
    seeds = list(seeds)
    if not screen_iterations or len(seeds) == 1 or screen_iterations >= config.max_iterations:
        results = _run_jobs([(make_model, s, config) for s in seeds], workers)
        return results[_best(results)]

    screen = replace(
        config,
        max_iterations=screen_iterations,
        frozen_iterations=min(config.frozen_iterations, screen_iterations),
    )
    results = _run_jobs([(make_model, s, screen) for s in seeds], workers)
    first = results[_best(results)]
    rest = replace(
        config,
        max_iterations=config.max_iterations - first.iterations,
        frozen_iterations=max(0, config.frozen_iterations - first.iterations),
    )
    if first.status == "converged" and first.iterations < screen_iterations:
        return first
    second = optimize(first.model, rest)
    trace = list(first.trace)
    for rec in second.trace[1:]:
        trace.append(replace(rec, iteration=rec.iteration + first.iterations))
    return OptimizeResult(second.model, trace, second.status, first.iterations + second.iterations)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    max_error: dict                 # segment name -> max scaled error
    flagged: list                   # (coordinate, segment name, analytic, numeric)
    checked: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.flagged

    def summary(self) -> str:
        lines = [f"{name}: {err:.2e}" for name, err in self.max_error.items()]
        lines += [f"flagged {c} ({nm}): analytic {a:.6g} numeric {n:.6g}" for c, nm, a, n in self.flagged]
        return "\n".join(lines)


def finite_difference_check(
    fun, grad, x, step=1e-4, tolerance=1e-5, abs_floor=1e-7, segments=None, max_coords=None, seed=0
) -> GradientCheckReport:
    """Compare ``grad(x)`` with fourth-order central differences of ``fun``.

    A coordinate is flagged when ``|a - n| > max(tolerance * max(|a|, |n|), abs_floor)``.
    The reported error is ``|a - n| / max(|a|, |n|, abs_floor / tolerance)``, so
    flagged coordinates are exactly those with error above ``tolerance``.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(grad(x), dtype=float)
    coords = np.arange(x.size)
    if max_coords is not None and x.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(x.size, max_coords, replace=False))
    num = np.full(x.size, np.nan)
    for i in coords:
        def f_at(t):
            xx = x.copy()
            xx[i] += t
            return fun(xx)
        num[i] = (-f_at(2 * step) + 8 * f_at(step) - 8 * f_at(-step) + f_at(-2 * step)) / (12 * step)
    diff = np.abs(a[coords] - num[coords])
    scale = np.maximum(np.maximum(np.abs(a[coords]), np.abs(num[coords])), abs_floor / tolerance)
    err = diff / scale
    names = segments or [("all", 0, x.size)]
    seg_of = np.empty(x.size, dtype=object)
    for name, lo, hi in names:
        seg_of[lo:hi] = name
    max_error = {}
    flagged = []
    for c, e in zip(coords, err):
        nm = seg_of[c]
        max_error[nm] = max(max_error.get(nm, 0.0), float(e))
        if e > tolerance or not np.isfinite(e):
            flagged.append((int(c), nm, float(a[c]), float(num[c])))
    return GradientCheckReport(max_error, flagged, coords, a, num, tolerance)


def check_gradients(model: DeepModel, step=1e-4, tolerance=1e-5, abs_floor=1e-7, max_coords=2000, seed=0):
    """Finite-difference check of the bound gradient in packed coordinates."""
    objective = BoundObjective(model)
    layout = objective.layout
    x = layout.pack(model)

    def fun(z):
        rep = objective.evaluate(z)[0]
        return rep.total if rep is not None else np.nan

    def grad(z):
        return objective.evaluate(z)[1]

    segs = [(s.name, s.start, s.stop) for s in layout.segments]
    return finite_difference_check(fun, grad, x, step, tolerance, abs_floor, segs, max_coords, seed)
