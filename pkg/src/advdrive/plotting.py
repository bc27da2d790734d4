"""Matplotlib figures written to files."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .paths import ReferencePath  # noqa: E402


def overhead_plot(path_out, ref: ReferencePath, traces: Dict[str, np.ndarray], objects=(),
                  bounds=None, track_width: Optional[float] = None):
    """Top-down view of the reference path and trajectory traces.

    Returns the axes-data endpoints of each trace so callers can check them.
    """
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    w = ref.densify(0.05)
    if ref.closed:
        w = np.vstack([w, w[:1]])
    ax.plot(w[:, 0], w[:, 1], "k--", lw=1, label="reference")
    ends = {}
    for name, xy in traces.items():
        xy = np.asarray(xy)
        line, = ax.plot(xy[:, 0], xy[:, 1], lw=1.5, label=name)
        x, y = line.get_data()
        ends[name] = (np.array([x[0], y[0]]), np.array([x[-1], y[-1]]))
    for p in objects:
        ax.plot(p[0], p[1], "s", color="tab:red", ms=7)
    if bounds is not None:
        ax.set_xlim(bounds.min[0], bounds.max[0])
        ax.set_ylim(bounds.min[1], bounds.max[1])
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path_out)
    plt.close(fig)
    return ends


def bar_table(path_out, columns: Sequence[str], means: Sequence[float], stds: Sequence[float], title: str = ""):
    fig, ax = plt.subplots(figsize=(7, 3.5), dpi=100)
    x = np.arange(len(columns))
    m = np.nan_to_num(np.asarray(means, dtype=float))
    s = np.nan_to_num(np.asarray(stds, dtype=float))
    ax.bar(x, m, yerr=s, capsize=4, color=["0.5", "tab:blue", "tab:orange", "tab:cyan", "tab:red"][:len(x)])
    ax.set_xticks(x)
    ax.set_xticklabels(columns, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("total CTE [m steps]")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path_out)
    plt.close(fig)


def loss_curves(path_out, curves: Dict[str, Sequence[float]], ylabel: str = "loss", log: bool = True):
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for name, c in curves.items():
        ax.plot(np.arange(len(c)), c, label=name)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("epoch / iteration")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path_out)
    plt.close(fig)
