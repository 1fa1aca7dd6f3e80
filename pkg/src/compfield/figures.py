"""Matplotlib report figures written alongside the delimited outputs.

Everything renders through the Agg backend with fixed metadata so repeated
runs produce byte-identical PNG files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .inference import TERNARY_VERTICES

__all__ = [
    "save_composition_figure",
    "save_distance_figure",
    "save_trace_figure",
    "save_decomposition_figure",
    "save_region_figure",
    "save_acd_heatmap",
]

_SAVE_KW = dict(dpi=120, metadata={"Software": "compfield"})


def _composition_image(zmap, n_rows, n_cols):
    rgb = np.clip(np.asarray(zmap, dtype=float), 0.0, 1.0).reshape(n_rows, n_cols, 3)
    rgb = np.where(np.isfinite(rgb), rgb, 1.0)
    return rgb[::-1]  # north up


def save_composition_figure(zmap, n_rows, n_cols, path, title=None, category_names=None):
    """RGB map of a composition field (barycentric corner colors)."""
    fig, ax = plt.subplots(figsize=(5, 5 * n_rows / max(n_cols, 1)))
    ax.imshow(_composition_image(zmap, n_rows, n_cols), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    if category_names:
        labels = [f"{c} = {n}" for c, n in zip(("red", "green", "blue"), category_names)]
        ax.set_xlabel(", ".join(labels), fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_distance_figure(values, n_rows, n_cols, path, vmax=None, title=None):
    """Grayscale per-cell distance map with a colorbar."""
    v = np.asarray(values, dtype=float).reshape(n_rows, n_cols)[::-1]
    fig, ax = plt.subplots(figsize=(5.4, 5 * n_rows / max(n_cols, 1)))
    im = ax.imshow(v, cmap="gray", vmin=0.0, vmax=vmax, interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_trace_figure(summary, path):
    """Trace plots for the scalar parameters and the log-posterior."""
    tr = summary.traces
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, key in zip(axes.ravel(), ("logpost", "loglik", "alpha", "kappa")):
        ax.plot(tr[key], lw=0.5)
        ax.axvline(summary.config.burn_in, color="k", ls="--", lw=0.8)
        ax.set_title(key)
        if key in ("alpha", "kappa"):
            ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_decomposition_figure(stages, n_rows, n_cols, path):
    """Panel of the cumulative predictor stages."""
    k = len(stages)
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.6))
    if k == 1:
        axes = [axes]
    for ax, (label, zmap) in zip(axes, stages):
        ax.imshow(_composition_image(zmap, n_rows, n_cols), interpolation="nearest")
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_region_figure(regions, path, category_names=None):
    """Ternary triangle with predictive-region boundaries."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    tri = np.vstack([TERNARY_VERTICES, TERNARY_VERTICES[:1]])
    ax.plot(tri[:, 0], tri[:, 1], color="k", lw=1.0)
    names = category_names or ("cat1", "cat2", "cat3")
    for v, name, ha in zip(TERNARY_VERTICES, names, ("right", "left", "center")):
        ax.annotate(name, v, fontsize=8, ha=ha,
                    xytext=(v[0], v[1] + (0.02 if v[1] > 0 else -0.05)))
    for region in regions:
        ax.plot(region.polygon[:, 0], region.polygon[:, 1], lw=1.2,
                label=f"cell {region.cell} ({region.coverage_fraction:.3f})")
    ax.legend(fontsize=7, loc="upper right")
    ax.set_aspect("equal")
    ax.axis("off")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_acd_heatmap(report, path, title=None):
    """Heatmap of the pairwise ACD matrix from compare_maps."""
    m = len(report.names)
    fig, ax = plt.subplots(figsize=(1.1 * m + 2.5, 1.0 * m + 2))
    im = ax.imshow(report.acd_matrix, cmap="viridis")
    ax.set_xticks(range(m), report.names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(m), report.names, fontsize=8)
    for i in range(m):
        for j in range(m):
            ax.annotate(f"{report.acd_matrix[i, j]:.3f}", (j, i),
                        ha="center", va="center", fontsize=7, color="w")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
