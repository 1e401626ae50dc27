"""Figures for a run directory.  Agg only; output bytes depend on the data alone."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.0,
    "svg.hashsalt": "pilotfarm",
}

KIND_COLORS = {"all": "0.2", "FUNCTION": "tab:blue", "EXECUTABLE": "tab:orange"}


def _save(fig, path):
    # no Software/date metadata, so reruns are byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_durations(lo, hi, counts, path):
    """Histogram of task durations; ``counts`` maps series name to bin counts."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = np.asarray(hi) - np.asarray(lo)
        for name, c in counts.items():
            if name == "all" and len(counts) > 1:
                ax.step(lo, c, where="post", color=KIND_COLORS[name], label=name)
            else:
                ax.bar(lo, c, width=width, align="edge", alpha=0.5,
                       color=KIND_COLORS.get(name), label=name)
        ax.set_yscale("symlog", linthresh=1)
        ax.set_xlabel("task duration [s]")
        ax.set_ylabel("tasks")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_concurrency(t, tasks, cores, available, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t0 = t[0] if len(t) else 0.0
        x = np.asarray(t) - t0
        ax.step(x, available, where="post", color="0.6", label="available cores")
        ax.step(x, cores, where="post", color="tab:green", label="busy cores")
        ax.step(x, tasks, where="post", color="tab:blue", linestyle="--", label="running tasks")
        ax.set_xlabel("time since pilot start [s]")
        ax.set_ylabel("count")
        ax.legend(loc="lower center")
        fig.tight_layout()
        _save(fig, path)


def plot_rate(edges, series, path):
    """``series`` maps name to per-bin rates in tasks/hour."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.asarray(edges[:-1]) - (edges[0] if len(edges) else 0.0)
        for name, v in series.items():
            ax.step(x, v, where="post", color=KIND_COLORS.get(name), label=name)
        ax.set_xlabel("time since pilot start [s]")
        ax.set_ylabel("completions [tasks/h]")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
