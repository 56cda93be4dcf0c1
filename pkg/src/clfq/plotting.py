"""Static SVG figures for evaluation reports.

Rendered next to the CSV outputs: one EDC plot per dataset, one DET plot
per dataset, and a bar chart of average partial areas with standard
deviations across datasets.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update(
    {
        "figure.figsize": (6.0, 4.0),
        "axes.grid": True,
        "grid.alpha": 0.3,
        "svg.hashsalt": "clfq",  # deterministic ids inside the SVG
        "legend.fontsize": 9,
    }
)


def plot_edc(curves: dict, f: float, pauc_limit: float, path, title: str = "") -> None:
    """One EDC plot; `curves` maps algorithm name to an EdcCurve."""
    fig, ax = plt.subplots()
    for name in sorted(curves):
        curve = curves[name]
        ax.plot(curve.fractions, curve.fnmr, label=name, linewidth=1.4)
    ax.axvspan(0.0, pauc_limit, color="0.85", zorder=0)
    ax.axhline(f, color="0.4", linestyle=":", linewidth=1.0)
    ax.set_xlabel("discard fraction")
    ax.set_ylabel("FNMR")
    ax.set_xlim(0.0, max(c.fractions[-1] for c in curves.values()))
    ax.set_ylim(bottom=0.0)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def plot_det(det, path, title: str = "") -> None:
    fig, ax = plt.subplots()
    ax.plot(det.fmr, det.fnmr, linewidth=1.4)
    ax.plot([0, 1], [0, 1], color="0.6", linestyle=":", linewidth=1.0)
    ax.scatter([det.eer], [det.eer], color="C3", zorder=3, s=18, label=f"EER = {det.eer:.3f}")
    ax.set_xlabel("FMR")
    ax.set_ylabel("FNMR")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def plot_pauc_bars(summary: dict, path, title: str = "") -> None:
    """Bar chart of mean partial area per algorithm with std-dev whiskers.

    `summary` maps algorithm name to a sequence of per-dataset values.
    """
    names = sorted(summary)
    means = [float(np.mean(summary[n])) for n in names]
    stds = [float(np.std(summary[n], ddof=1)) if len(summary[n]) > 1 else 0.0 for n in names]
    fig, ax = plt.subplots()
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=stds, capsize=4, color="C0", alpha=0.85)
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("EDC PAUC (avg over datasets)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
