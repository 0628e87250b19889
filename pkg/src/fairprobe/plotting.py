"""Figures written next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from fairprobe.cofair import FairnessDistribution, density_curve  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version
_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path):
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def top_pair_attributes(r: np.ndarray, top: int = 15):
    """Indices of attributes that occur in the ``top`` largest |r| pairs."""
    iu = np.triu_indices(r.shape[0], 1)
    order = np.argsort(-np.abs(r[iu]), kind="stable")[:top]
    keep = set(iu[0][order]) | set(iu[1][order])
    return sorted(keep)


def plot_correlation(matrix, path, top: int = 15):
    idx = top_pair_attributes(matrix.r, top)
    sub = matrix.r[np.ix_(idx, idx)]
    names = [matrix.names[i] for i in idx]
    size = max(4.0, 0.45 * len(idx) + 2.0)
    fig, ax = plt.subplots(figsize=(size + 1.2, size))
    im = ax.imshow(sub, cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_xticks(range(len(idx)))
    ax.set_yticks(range(len(idx)))
    ax.set_xticklabels(names, rotation=90, fontsize=8)
    ax.set_yticklabels(names, fontsize=8)
    if len(idx) <= 20:
        for i in range(len(idx)):
            for j in range(len(idx)):
                ax.text(j, i, f"{sub[i, j]:.2f}", ha="center", va="center", fontsize=6)
    fig.colorbar(im, ax=ax, label="Pearson r")
    fig.tight_layout()
    _save(fig, path)


def plot_clustering(diagnostics, selected: int, path):
    it = np.array([d["iteration"] for d in diagnostics])
    n_clusters = np.array([d["n_clusters"] for d in diagnostics], dtype=float)
    mean_r = np.array([np.nan if d["mean_abs_r"] is None else d["mean_abs_r"] for d in diagnostics],
                      dtype=float)
    max_r = np.array([np.nan if d["max_abs_r"] is None else d["max_abs_r"] for d in diagnostics],
                     dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    for d in diagnostics:
        if "valid" in d:
            color = "#d8f0d8" if d["valid"] else "#fbe0c4"
            ax.axvspan(d["iteration"] - 0.5, d["iteration"] + 0.5, color=color, lw=0)
    ax.plot(it, mean_r, "o-", ms=3, label="mean inter-cluster |r|")
    ax.plot(it, max_r, "s-", ms=3, label="max inter-cluster |r|")
    ax.axvline(selected, color="k", ls="--", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("|r|")
    ax2 = ax.twinx()
    ax2.plot(it, n_clusters, "^-", ms=3, color="gray", label="clusters")
    ax2.set_ylabel("number of clusters")
    lines = ax.get_legend_handles_labels()
    lines2 = ax2.get_legend_handles_labels()
    ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], fontsize=8, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def plot_density(dist: FairnessDistribution, path, marks=None):
    grid, dens = density_curve(dist)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(grid, dens, lw=1.5)
    ax.plot(dist.samples, np.zeros(len(dist.samples)), "|", color="k", ms=10)
    for label, x in (marks or {}).items():
        ax.axvline(x, ls="--", lw=1)
        ax.text(x, ax.get_ylim()[1] * 0.9, label, rotation=90, fontsize=8, ha="right")
    ax.set_xlim(0, 1)
    ax.set_xlabel("iGARBE")
    ax.set_ylabel("density")
    fig.tight_layout()
    _save(fig, path)


def plot_assignment_distribution(rows, path, title: str = ""):
    attrs = []
    for r in rows:
        if r["attribute"] not in attrs:
            attrs.append(r["attribute"])
    share = {(r["attribute"], r["label"]): r["share"] for r in rows}
    fig, ax = plt.subplots(figsize=(7, 0.3 * len(attrs) + 1.5))
    left = np.zeros(len(attrs))
    colors = {-1: "#c0392b", 0: "#bbbbbb", 1: "#27ae60"}
    for lab in (-1, 0, 1):
        vals = np.array([share.get((a, lab), 0.0) for a in attrs])
        ax.barh(range(len(attrs)), vals, left=left, color=colors[lab], label=f"{lab:+d}")
        left += vals
    for i, a in enumerate(attrs):
        if any(r["strong"] for r in rows if r["attribute"] == a):
            ax.text(1.01, i, "*", va="center")
    ax.axvline(0.9, color="k", lw=0.8, ls=":")
    ax.set_yticks(range(len(attrs)))
    ax.set_yticklabels(attrs, fontsize=8)
    ax.set_xlim(0, 1.05)
    ax.set_xlabel("relative frequency")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8, loc="lower right", ncol=3)
    fig.tight_layout()
    _save(fig, path)
