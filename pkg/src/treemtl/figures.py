"""Matplotlib renderings written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(log, path):
    """Per-step task losses with the epoch learning rate on a twin axis."""
    steps = [row["step"] for row in log.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [row["loss_fatigue"] for row in log.steps], label="fatigue loss", lw=1)
    ax.plot(steps, [row["loss_face"] for row in log.steps], label="face loss", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(steps, [row["lr"] for row in log.steps], color="gray", ls="--", lw=1, label="lr")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc(roc, path, title="ROC"):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(roc.fpr, roc.tpr, lw=1.5, label=f"AUC = {roc.auc:.4f}")
    ax.plot([0, 1], [0, 1], color="gray", ls=":", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(rows, path):
    """Grouped bars of parameter count (M) and GFLOPs per compared model."""
    labels = [row["label"] for row in rows]
    x = range(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].bar(x, [row["params_m"] for row in rows], color="steelblue")
    axes[0].set_ylabel("parameters (M)")
    axes[1].bar(x, [row["gflops"] for row in rows], color="indianred")
    axes[1].set_ylabel("GFLOPs")
    for ax in axes:
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
