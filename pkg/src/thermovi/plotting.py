"""Optional figures for trajectory comparisons and training curves.

The CLI writes plot-ready CSVs by default; these helpers only run when a
command is given ``--figures``.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}


def _grid(n: int, ncols: int = 3):
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.4 * nrows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.set_visible(False)
    return fig, axes.flat


def plot_trajectories(t, columns: dict, path, reference: dict | None = None, labels=("model", "reference")) -> Path:
    """One panel per column; ``columns`` and ``reference`` map names to arrays."""
    with plt.rc_context(STYLE):
        fig, axes = _grid(len(columns))
        for ax, (name, y) in zip(axes, columns.items()):
            if reference is not None and name in reference:
                ax.plot(t, reference[name], color="tab:blue", label=labels[1])
            ax.plot(t, y, color="k", ls="--", label=labels[0])
            ax.set_title(name)
            ax.set_xlabel("t")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_errors(t, energy_rel, mae_by_column: dict, path) -> Path:
    """Relative energy error (left) and absolute error per component (right)."""
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
        ax0.plot(t, energy_rel, color="k")
        ax0.set_title("(E - E0) / |E0|")
        ax0.set_xlabel("t")
        for name, err in mae_by_column.items():
            ax1.semilogy(t, np.maximum(err, 1e-16), label=name)
        ax1.set_title("absolute error")
        ax1.set_xlabel("t")
        ax1.legend(frameon=False, ncol=2)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_loss(epochs, loss, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.semilogy(epochs, loss, color="k")
        ax.semilogy(epochs, np.minimum.accumulate(loss), color="tab:red", lw=0.8, label="best so far")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
