"""Command-line front end.

Exit codes: 0 converged, 2 iteration cap reached, 3 numerical failure,
4 configuration or input error. Set ``DEEPGP_LOG_LEVEL`` (e.g. ``DEBUG``)
to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .archive import ArchiveError, ModelArchive
from .bound import BoundError, evidence_lower_bound
from .config import ConfigError, RunConfig
from .experiments import (
    RegressionFactory,
    center,
    regression_input_transform,
    top_nn_error,
)
from .kernels import JitterError
from .modelgen import (
    FlatGP,
    Perturbation,
    ard_profile,
    dominant_dims,
    layer_predictors,
    level_relevance,
    load_usps,
    mse,
    nn_error,
    predict_outputs,
    relevant_counts,
    sample_from_layer,
    synthetic_digits,
    toy_hierarchy_data,
    toy_regression_data,
)
from .training import NumericalFailure, OptimizerConfig, check_gradients, greedy_init, optimize_restarts

logger = logging.getLogger("deepgp")

EXIT_OK, EXIT_ITER_CAP, EXIT_NUMERICAL, EXIT_CONFIG = 0, 2, 3, 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# tabular IO
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_matrix(path, X, prefix, extra=None):
    """Matrix as CSV with columns ``<prefix>0..``; ``extra`` maps column name -> values."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    extra = extra or {}
    header = list(extra) + [f"{prefix}{j}" for j in range(X.shape[1])]
    rows = ([extra[k][i] for k in extra] + list(X[i]) for i in range(X.shape[0]))
    return write_csv(path, header, rows)


def write_dataset(path, outputs, inputs=None, labels=None, split=None):
    extra = {}
    if split is not None:
        extra["split"] = np.where(split, "train", "test")
    if labels is not None:
        extra["label"] = np.asarray(labels).astype(int)
    X = np.asarray(outputs, dtype=float)
    header_in = []
    if inputs is not None:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float).reshape(X.shape[0], -1))
        header_in = [f"x{j}" for j in range(inputs.shape[1])]
        X = np.hstack([inputs, X])
    header = list(extra) + header_in + [f"y{j}" for j in range(np.asarray(outputs).shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(X.shape[0]):
            w.writerow([extra[k][i] for k in extra] + [repr(float(v)) for v in X[i]])
    return path


def read_dataset(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"dataset {path} is empty")
    header, body = rows[0], rows[1:]
    cols = {name: [r[i] for r in body] for i, name in enumerate(header)}
    ycols = [h for h in header if h.startswith("y")]
    xcols = [h for h in header if h.startswith("x")]
    if not ycols:
        raise InputError(f"dataset {path} has no output columns (y0, y1, ...)")
    out = {"outputs": np.array([[float(v) for v in cols[c]] for c in ycols]).T}
    if xcols:
        out["inputs"] = np.array([[float(v) for v in cols[c]] for c in xcols]).T
    if "label" in cols:
        out["labels"] = np.array([int(v) for v in cols["label"]])
    if "split" in cols:
        out["train"] = np.array([v == "train" for v in cols["split"]])
    return out


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------


def build_dataset(cfg: RunConfig):
    """Returns ``(dataset dict, truth dict)`` for the configured experiment."""
    kind, seed = cfg["experiment"], cfg["seed"]
    if kind == "toy-hierarchy":
        Y, truth = toy_hierarchy_data(seed)
        return {"outputs": Y}, {"truth_level2": truth[0], "truth_level1": truth[1]}
    if kind == "toy-regression":
        d = toy_regression_data(seed)
        return {"outputs": d["outputs"], "inputs": d["inputs"], "train": d["train"]}, {"truth_warp": d["warp"]}
    if kind == "digits":
        usps = cfg["data"]["usps_path"]
        if usps:
            try:
                pixels, labels = load_usps(usps, seed=seed)
            except (OSError, ValueError) as exc:
                raise InputError(str(exc)) from exc
            return {"outputs": pixels, "labels": labels}, {}
        pixels, labels, truth = synthetic_digits(seed)
        return {"outputs": pixels, "labels": labels}, {"truth_level2": truth[0], "truth_level1": truth[1]}
    raise InputError("experiment 'custom' reads its dataset from data.path; nothing to generate")


def load_dataset(cfg: RunConfig, path=None):
    path = path or cfg["data"]["path"]
    if path:
        return read_dataset(path), str(path)
    return build_dataset(cfg)[0], None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    data, truth = build_dataset(cfg)
    files = {}
    p = write_dataset(out / "dataset.csv", data["outputs"], data.get("inputs"), data.get("labels"), data.get("train"))
    files["dataset.csv"] = sha256(p)
    for name, arr in truth.items():
        p = write_matrix(out / f"{name}.csv", arr, "z")
        files[p.name] = sha256(p)
    manifest = {
        "command": "generate",
        "experiment": cfg["experiment"],
        "seed": cfg["seed"],
        "rows": int(data["outputs"].shape[0]),
        "output_dim": int(data["outputs"].shape[1]),
        "train_rows": int(np.sum(data["train"])) if "train" in data else None,
        "config": cfg.to_dict(),
        "files": files,
        "build": f"deepgp {__version__}",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


class _ModelFactory:
    def __init__(self, cfg, Y):
        self.cfg, self.Y = cfg, Y

    def __call__(self, seed):
        m = self.cfg["model"]
        return greedy_init(self.Y, m["layer_dims"], m["num_inducing"], seed=seed, groups=m["groups"])


def optimizer_config(cfg: RunConfig, regression=False) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(
        max_iterations=o["max_iterations"],
        tolerance=float(o["tolerance"]),
        frozen_iterations=o["frozen_iterations"],
        frozen_kinds=tuple(o["frozen_kinds"]),
        always_frozen=("parent",) if regression else (),
        seed=cfg["seed"],
    )


def train_model(cfg: RunConfig, data: dict, log_path=None):
    """Fit the configured model; returns ``(OptimizeResult, extra archive arrays)``."""
    regression = cfg["experiment"] == "toy-regression" or ("inputs" in data and "train" in data)
    arrays = {}
    if regression:
        if "inputs" not in data:
            raise InputError("regression training needs input columns (x0, ...)")
        tr = data.get("train", np.ones(data["outputs"].shape[0], dtype=bool))
        Y, offset = center(data["outputs"][tr])
        X = data["inputs"][tr]
        arrays.update(output_offset=offset, train_inputs=X)
        m = cfg["model"]
        K = min(m["num_inducing"], Y.shape[0]) if isinstance(m["num_inducing"], int) else m["num_inducing"]
        factory = RegressionFactory(X, Y, m["layer_dims"], K, cfg["seed"])
    else:
        Y, offset = center(data["outputs"])
        arrays["output_offset"] = offset
        factory = _ModelFactory(cfg, Y)
    ocfg = optimizer_config(cfg, regression)
    seeds = [cfg["seed"] + r for r in range(cfg["optimizer"]["restarts"])]
    res = optimize_restarts(factory, ocfg, seeds, workers=cfg["threads"],
                            screen_iterations=cfg["optimizer"]["screen_iterations"])
    if log_path:
        with open(log_path, "w") as fh:
            for rec in res.trace:
                fh.write(rec.to_json() + "\n")
    return res, arrays


def cmd_train(cfg: RunConfig, out: Path, data_path=None):
    out.mkdir(parents=True, exist_ok=True)
    data, src = load_dataset(cfg, data_path)
    res, arrays = train_model(cfg, data, out / "trace.jsonl")
    archive = ModelArchive.from_model(
        res.model,
        cfg.to_dict(),
        res.report,
        {
            "seed": cfg["seed"],
            "iterations": res.iterations,
            "status": res.status,
            "depth": res.model.depth,
            "dataset_sha256": sha256(src) if src else None,
        },
        arrays,
    )
    archive.save(out / "model.dga")
    logger.info("bound %.6f (%.6f per datapoint), status %s", res.report.total, res.report.per_datapoint, res.status)
    return EXIT_OK if res.status == "converged" else EXIT_ITER_CAP


def evaluate_archive(archive: ModelArchive, data: dict, out: Path, samples_per_level=8, scale=2.0):
    """Write metrics, plot data and figures for a trained model. Returns the metrics dict."""
    out.mkdir(parents=True, exist_ok=True)
    model = archive.model()
    report = evidence_lower_bound(model)
    labels = data.get("labels")
    offset = archive.arrays.get("output_offset", np.zeros(model.data.shape[1]))
    metrics = {
        "depth": model.depth,
        "bound": report.total,
        "bound_per_datapoint": report.per_datapoint,
    }
    counts = relevant_counts(model)
    for lvl, c in enumerate(counts, start=1):
        metrics[f"relevant_dims_level{lvl}"] = c

    recs = ard_profile(model)
    write_csv(
        out / "ard_profile.csv",
        ["layer", "group", "level", "dim", "weight", "scaled", "normalized", "relevant"],
        (
            [r.layer, r.group, r.level, q, r.weights[q], r.scaled[q], r.normalized[q], int(r.relevant[q])]
            for r in recs
            for q in range(r.weights.size)
        ),
    )
    plotting.ard_weights(recs, out / "ard_profile.svg")

    preds = layer_predictors(model)
    regression = "train_inputs" in archive.arrays
    for lvl in range(1, model.depth + 1):
        q = model.latent(lvl)
        if regression and lvl == model.depth:
            continue
        lab = labels if (labels is not None and labels.size == q.num_data) else None
        extra = {"label": lab} if lab is not None else None
        write_matrix(out / f"latent_level{lvl}.csv", np.hstack([q.means, q.variances]), "v", extra)
        dims = dominant_dims(model, lvl)
        plotting.latent_projection(q.means, lab, dims, out / f"latent_level{lvl}.svg", title=f"level {lvl}")
        if lab is not None:
            _, mask = level_relevance(model, lvl)
            metrics[f"nn_errors_level{lvl}"] = nn_error(q.means, lab, np.flatnonzero(mask))
        if samples_per_level:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                S = sample_from_layer(model, lvl, Perturbation("grid", scale), samples_per_level) + offset
            write_matrix(out / f"samples_level{lvl}.csv", S, "y")
            plotting.sample_grid(S, out / f"samples_level{lvl}.svg", title=f"samples from level {lvl}")
    if labels is not None and labels.size == model.num_data:
        metrics["nn_errors_top"] = top_nn_error(model, labels)
        write_csv(out / "nn_errors.csv", ["level", "errors"],
                  [[lvl, metrics[f"nn_errors_level{lvl}"]] for lvl in range(1, model.depth + 1)])

    if regression:
        X, Y, tr = data["inputs"], data["outputs"], data.get("train")
        if tr is None:
            tr = np.zeros(Y.shape[0], dtype=bool)
        transform = regression_input_transform(archive.arrays["train_inputs"])
        deep = predict_outputs(model, transform(X), predictors=preds) + offset
        flat = FlatGP.fit(X[tr], Y[tr] - offset)
        flat_pred = flat.predict(X) + offset
        test = ~tr
        if np.any(test):
            metrics["test_mse_deep"] = mse(deep[test], Y[test])
            metrics["test_mse_flat"] = mse(flat_pred[test], Y[test])
        metrics["train_mse_deep"] = mse(deep[tr], Y[tr]) if np.any(tr) else float("nan")
        write_matrix(out / "predictions.csv", np.hstack([deep, flat_pred]), "p",
                     {"split": np.where(tr, "train", "test")})
        plotting.regression_fit(X, Y, deep, flat_pred, tr, out / "regression.svg")

    write_csv(out / "metrics.csv", ["metric", "value"], sorted(metrics.items()))
    return metrics


def cmd_evaluate(cfg: RunConfig, out: Path, archive_path, data_path=None):
    try:
        archive = ModelArchive.load(archive_path)
    except OSError as exc:
        raise InputError(str(exc)) from exc
    if data_path is None and archive.config.get("data", {}).get("path") is None:
        data, _ = build_dataset(RunConfig.from_dict(archive.config))
    else:
        data, _ = load_dataset(cfg, data_path)
    ev = cfg["evaluation"]
    evaluate_archive(archive, data, out, ev["samples_per_level"], ev["perturbation_scale"])
    return EXIT_OK


def cmd_check_grad(cfg: RunConfig, out: Path, data_path=None):
    out.mkdir(parents=True, exist_ok=True)
    data, _ = load_dataset(cfg, data_path)
    Y, _ = center(data["outputs"])
    model = _ModelFactory(cfg, Y)(cfg["seed"])
    rep = check_gradients(model)
    write_csv(out / "gradcheck.csv", ["segment", "max_error"], sorted(rep.max_error.items()))
    write_csv(out / "gradcheck_flagged.csv", ["coordinate", "segment", "analytic", "numeric"], rep.flagged)
    for name, err in sorted(rep.max_error.items()):
        print(f"{name:40s} {err:.3e}")
    print("PASS" if rep.passed else f"FAIL ({len(rep.flagged)} coordinates flagged)")
    return EXIT_OK if rep.passed else EXIT_NUMERICAL


def cmd_sweep_depth(cfg: RunConfig, out: Path, data_path=None):
    out.mkdir(parents=True, exist_ok=True)
    data, src = load_dataset(cfg, data_path)
    dims = cfg["model"]["layer_dims"]
    max_depth = min(cfg["sweep"]["max_depth"], len(dims))
    rows, worst = [], EXIT_OK
    for H in range(1, max_depth + 1):
        sub = cfg.override(model__layer_dims=dims[:H])
        if isinstance(cfg["model"]["num_inducing"], list):
            sub = sub.override(model__num_inducing=cfg["model"]["num_inducing"][:H])
        d = out / f"depth{H}"
        d.mkdir(parents=True, exist_ok=True)
        res, arrays = train_model(sub, data, d / "trace.jsonl")
        archive = ModelArchive.from_model(
            res.model, sub.to_dict(), res.report,
            {"seed": sub["seed"], "iterations": res.iterations, "status": res.status, "depth": H,
             "dataset_sha256": sha256(src) if src else None},
            arrays,
        )
        archive.save(d / "model.dga")
        ev = sub["evaluation"]
        metrics = evaluate_archive(archive, data, d, ev["samples_per_level"], ev["perturbation_scale"])
        rows.append(
            {
                "depth": H,
                "bound": res.report.total,
                "bound_per_datapoint": res.report.per_datapoint,
                "nn_errors": metrics.get("nn_errors_top", -1),
                "status": res.status,
            }
        )
        if res.status != "converged":
            worst = EXIT_ITER_CAP
    write_csv(out / "model_selection.csv", ["depth", "bound", "bound_per_datapoint", "nn_errors", "status"],
              ([r["depth"], r["bound"], r["bound_per_datapoint"], r["nn_errors"], r["status"]] for r in rows))
    plotting.model_selection(rows, out / "model_selection.svg")
    best = max(rows, key=lambda r: r["bound"])
    print(f"best depth by bound: {best['depth']} ({best['bound_per_datapoint']:.4f} nats per datapoint)")
    return worst


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="deepgp", description="Deep Gaussian process experiments")
    p.add_argument("--version", action="version", version=f"deepgp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML/JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--restarts", type=int, help="override optimizer.restarts")
        sp.add_argument("--max-iters", type=int, help="override optimizer.max_iterations")
        sp.add_argument("--threads", type=int, help="worker processes for restarts")
        sp.add_argument("--data", help="dataset CSV (default: data.path or regenerate from the seed)")
        return sp

    common(sub.add_parser("generate", help="write synthetic datasets, ground truth and a manifest"))
    common(sub.add_parser("train", help="train a model and write an archive plus trace"))
    ev = common(sub.add_parser("evaluate", help="metrics, plot data and figures for an archive"))
    ev.add_argument("--archive", required=True)
    common(sub.add_parser("check-grad", help="finite-difference check of the bound gradient"))
    common(sub.add_parser("sweep-depth", help="train and evaluate depths 1..H and tabulate the bound"))
    return p


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("DEEPGP_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.data)
        overrides = {
            "seed": args.seed,
            "optimizer__restarts": args.restarts,
            "threads": args.threads,
        }
        if args.max_iters is not None:
            overrides["optimizer__max_iterations"] = args.max_iters
            overrides["optimizer__frozen_iterations"] = min(cfg["optimizer"]["frozen_iterations"], args.max_iters)
        cfg = cfg.override(**overrides)
        out = Path(args.out or cfg["output_dir"])
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.data)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.archive, args.data)
        if args.command == "check-grad":
            return cmd_check_grad(cfg, out, args.data)
        if args.command == "sweep-depth":
            return cmd_sweep_depth(cfg, out, args.data)
    except (ConfigError, InputError, ArchiveError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, BoundError, JitterError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
