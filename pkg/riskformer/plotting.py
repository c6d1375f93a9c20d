# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Static report figures: training loss curves and per-cluster label counts.
"""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from riskformer.util import DataError, check_arg, logger  # noqa: E402


def plot_loss_curves(histories, path, title="Training loss"):
    """Draw one loss-per-epoch line for every entry of `histories`.

    Args:
        histories (dict): name -> list of epoch losses
        path (str): target image file (format from the extension)
    """
    check_arg(histories, dict)
    if not histories:
        raise DataError("No training history to plot")
    fig, ax = plt.subplots(figsize=(8, 5))
    try:
        for name, losses in histories.items():
            epochs = np.arange(1, len(losses) + 1)
            ax.plot(epochs, losses, marker=".", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean MSE")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.savefig(path, dpi=150, bbox_inches="tight")
    finally:
        plt.close(fig)
    logger.info(f"Wrote loss curves to '{path}'")
    return path


def plot_cluster_labels(metrics, path, title="Labeled accounts per cluster"):
    """Draw grouped bars of the labeled count per cluster and report.

    Args:
        metrics (dict): the 'reports' part of a metrics summary, i.e.
            name -> {'clusters': [{'cluster': k, 'labeled': n, ...}, ...]}
    """
    check_arg(metrics, dict)
    if not metrics:
        raise DataError("No cluster metrics to plot")
    n_reports = len(metrics)
    k_max = max(len(m["clusters"]) for m in metrics.values())
    width = 0.8 / n_reports

    fig, ax = plt.subplots(figsize=(8, 5))
    try:
        for i, (name, m) in enumerate(metrics.items()):
            ks = np.array([row["cluster"] for row in m["clusters"]])
            counts = [row["labeled"] for row in m["clusters"]]
            ax.bar(ks + (i - (n_reports - 1) / 2) * width, counts, width=width, label=name)
        ax.set_xticks(np.arange(1, k_max + 1))
        ax.set_xlabel("cluster (1 = highest risk)")
        ax.set_ylabel("labeled accounts")
        ax.set_title(title)
        ax.legend()
        fig.savefig(path, dpi=150, bbox_inches="tight")
    finally:
        plt.close(fig)
    logger.info(f"Wrote cluster label histogram to '{path}'")
    return path
