"""Static SVG figures for evaluation reports."""
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden_mean = (math.sqrt(5) - 1.0) / 2.0
colors = ["#08589e", "#e34a33", "#31a354", "#756bb1", "#fdae6b", "#636363"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.markersize": 3,
    "lines.linewidth": 1,
    "svg.hashsalt": "deepgp",     # stable element ids across runs
    "svg.fonttype": "none",
}
matplotlib.rcParams.update(params)


def new(width=4.0, nrows=1, ncols=1, height=None):
    height = height or width * golden_mean
    fig, ax = plt.subplots(nrows=nrows, ncols=ncols, figsize=(width, height), squeeze=False)
    return fig, ax


def save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def ard_weights(records, path):
    """One bar chart per (layer, group) of normalised ARD weights."""
    n = len(records)
    fig, ax = new(width=3.0 * min(n, 3), nrows=math.ceil(n / 3), ncols=min(n, 3), height=2.0 * math.ceil(n / 3))
    axes = ax.ravel()
    for a, rec in zip(axes, records):
        idx = np.arange(rec.normalized.size)
        a.bar(idx + 1, rec.normalized, color=[colors[0] if r else "#bdbdbd" for r in rec.relevant])
        a.set_title(f"layer {rec.layer} group {rec.group}")
        a.set_xticks(idx + 1)
        a.set_ylim(0, 1.05)
    for a in axes[n:]:
        a.axis("off")
    return save(fig, path)


def latent_projection(means, labels, dims, path, title=None):
    fig, ax = new()
    a = ax[0, 0]
    X = np.asarray(means)
    d0, d1 = (dims[0], dims[1]) if len(dims) > 1 else (dims[0], dims[0])
    if labels is None:
        a.scatter(X[:, d0], X[:, d1], s=6)
    else:
        for i, lab in enumerate(np.unique(labels)):
            sel = labels == lab
            a.scatter(X[sel, d0], X[sel, d1], s=6, label=str(lab), color=colors[i % len(colors)])
        a.legend(frameon=False)
    a.set_xlabel(f"dim {d0}")
    a.set_ylabel(f"dim {d1}")
    if title:
        a.set_title(title)
    return save(fig, path)


def sample_grid(samples, path, title=None):
    """Rows of generated outputs; square outputs are drawn as images, others as lines."""
    S = np.asarray(samples)
    side = int(round(math.sqrt(S.shape[1])))
    if side * side == S.shape[1] and side > 2:
        fig, ax = new(width=1.0 * S.shape[0], ncols=S.shape[0], height=1.2)
        for a, row in zip(ax.ravel(), S):
            a.imshow(row.reshape(side, side), cmap="gray")
            a.axis("off")
    else:
        fig, ax = new()
        ax[0, 0].plot(S.T)
        ax[0, 0].set_xlabel("output dimension")
    if title:
        fig.suptitle(title)
    return save(fig, path)


def model_selection(rows, path):
    fig, ax = new(width=5.0, ncols=2, height=2.2)
    depth = [r["depth"] for r in rows]
    ax[0, 0].plot(depth, [r["bound_per_datapoint"] for r in rows], "o-")
    ax[0, 0].set_xlabel("hidden layers")
    ax[0, 0].set_ylabel("bound / N")
    ax[0, 1].plot(depth, [r["nn_errors"] for r in rows], "s-", color=colors[1])
    ax[0, 1].set_xlabel("hidden layers")
    ax[0, 1].set_ylabel("top-layer 1-NN errors")
    return save(fig, path)


def regression_fit(inputs, truth, deep_pred, flat_pred, train_mask, path):
    fig, ax = new(width=4.5)
    a = ax[0, 0]
    x = np.ravel(inputs)
    order = np.argsort(x)
    a.plot(x[order], truth[order, 0], color="k", label="truth")
    if flat_pred is not None:
        a.plot(x[order], flat_pred[order, 0], "--", label="flat GP")
    a.plot(x[order], deep_pred[order, 0], label="deep GP")
    a.scatter(x[train_mask], truth[train_mask, 0], s=10, color=colors[1], zorder=3, label="train")
    a.set_xlabel("input")
    a.set_ylabel("output 0")
    a.legend(frameon=False)
    return save(fig, path)


def bound_trace(bounds, path):
    fig, ax = new()
    ax[0, 0].plot(np.arange(len(bounds)), bounds)
    ax[0, 0].set_xlabel("iteration")
    ax[0, 0].set_ylabel("bound")
    return save(fig, path)
