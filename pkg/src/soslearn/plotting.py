"""Report figures: kernels, SoS maps, objective traces and metric boxplots.

Everything renders through the Agg backend straight to files; no figure is
ever shown interactively.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "image.cmap": "viridis",
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# stable PNG bytes across runs
_PNG_META = {"Software": None}


@contextmanager
def report_style():
    with plt.rc_context(STYLE):
        yield


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META if path.suffix == ".png" else None,
                bbox_inches="tight")
    plt.close(fig)
    return path


def _extent_mm(grid, nx=None):
    nx = grid.nx if nx is None else nx
    return [0, nx * grid.dx * 1e3, grid.nz * grid.dz * 1e3, 0]


def plot_kernels(model, path, title=None):
    """One panel per pair, symmetric colour scale per panel."""
    n = len(model)
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    kz, kx = model.kernel_shape
    with report_style():
        fig, axes = plt.subplots(rows, cols, figsize=(1.8 * cols, 2.2 * rows), squeeze=False)
        for ax, kern in zip(axes.flat, model.kernels):
            v = np.abs(kern.values).max() or 1.0
            ax.imshow(kern.values * 1e3, cmap="RdBu_r", vmin=-v * 1e3, vmax=v * 1e3,
                      extent=_extent_mm(model.grid, kx), aspect="equal")
            ax.set_title(f"({kern.pair.theta1_deg:g}, {kern.pair.theta2_deg:g}) deg")
            ax.set_xticks([])
            ax.set_yticks([])
        for ax in list(axes.flat)[n:]:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_sos_map(sos, grid, path, c0=1500.0, half_window=25.0, title=None, truth=None):
    maps = [("reconstruction", sos)] if truth is None else [("ground truth", truth), ("reconstruction", sos)]
    with report_style():
        fig, axes = plt.subplots(1, len(maps), figsize=(2.6 * len(maps), 3.0), squeeze=False)
        for ax, (label, img) in zip(axes.flat, maps):
            im = ax.imshow(img, cmap="gray", vmin=c0 - half_window, vmax=c0 + half_window,
                           extent=_extent_mm(grid))
            ax.set_title(label)
            ax.set_xlabel("x [mm]")
            ax.set_ylabel("z [mm]")
            fig.colorbar(im, ax=ax, shrink=0.8, label="SoS [m/s]")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_objective_trace(trace, path):
    with report_style():
        fig, ax = plt.subplots(figsize=(3.2, 2.2))
        ax.semilogy(np.arange(len(trace)), trace, lw=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("smoothed objective")
        return _save(fig, path)


_METRIC_LABELS = {"rmse_t": r"RMSE$_t$ [ns]", "rmse_c": r"RMSE$_c$ [m/s]", "delta_sos": r"$\Delta$SoS [m/s]"}
_METRIC_SCALE = {"rmse_t": 1e9, "rmse_c": 1.0, "delta_sos": 1.0}


def _stars(p):
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return "ns"


def plot_metric_boxplots(reports: dict, path, comparisons: dict | None = None):
    """Three boxplot panels, one box per model; significance marks against the baseline."""
    names = list(reports)
    with report_style():
        fig, axes = plt.subplots(1, 3, figsize=(7.0, 2.6))
        for ax, key in zip(axes, ("rmse_t", "rmse_c", "delta_sos")):
            data = [reports[n].column(key) * _METRIC_SCALE[key] for n in names]
            ax.boxplot(data, showfliers=True, widths=0.6)
            ax.set_xticks(range(1, len(names) + 1), names, rotation=20)
            ax.set_ylabel(_METRIC_LABELS[key])
            if comparisons:
                top = max(np.max(d) for d in data)
                for i, n in enumerate(names[1:], start=2):
                    if n in comparisons:
                        ax.text(i, top, _stars(comparisons[n][key]["p_value"]),
                                ha="center", va="bottom")
        fig.tight_layout()
        return _save(fig, path)
