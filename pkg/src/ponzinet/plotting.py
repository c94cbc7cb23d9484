"""Figure helpers for the evaluation report (Agg backend, file output only)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "ponzinet",
}

# keeps PNG bytes identical across runs
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)


def plot_importance(names, values, path, title="Feature importance (mean decrease in impurity)"):
    """Horizontal bars, most important feature on top."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(-values, kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        ypos = np.arange(len(order))
        ax.barh(ypos, values[order][::-1], color="#4c72b0")
        ax.set_yticks(ypos)
        ax.set_yticklabels([names[i] for i in order][::-1])
        ax.set_xlabel("importance")
        ax.set_title(title)
        _save(fig, path)


def plot_method_comparison(summary, datasets, methods, labels, path, metric="recall"):
    """Grouped bars of one metric (mean with std error bars) per method and dataset.

    ``summary`` maps (dataset, method) -> {metric: (mean, std, count)}.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        width = 0.8 / max(1, len(datasets))
        x = np.arange(len(methods))
        for j, ds in enumerate(datasets):
            means = [summary.get((ds, m), {}).get(metric, (np.nan, 0, 0))[0] for m in methods]
            stds = [summary.get((ds, m), {}).get(metric, (np.nan, 0, 0))[1] for m in methods]
            ax.bar(x + (j - (len(datasets) - 1) / 2) * width, means, width, yerr=stds,
                   capsize=2, label=ds)
        ax.set_xticks(x)
        ax.set_xticklabels([labels[m] for m in methods], rotation=20)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(metric)
        if len(datasets) > 1:
            ax.legend(frameon=False)
        _save(fig, path)


def plot_training_curve(log, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(log.epoch, log.train_loss, label="train")
        ax.plot(log.epoch, log.val_loss, label="validation")
        if log.best_epoch > 0:
            ax.axvline(log.best_epoch, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)
