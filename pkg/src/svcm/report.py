"""Figure rendering for fit and study runs.

All figures are written as PNG files next to the delimited output; the Agg
backend is forced so rendering works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render_fit_report", "render_study_report"]

_DPI = 110


def _mid_slice(mask, values, fill=0.0):
    grid = mask.grid
    dense = mask.scatter(np.asarray(values, dtype=np.float64), fill=fill)
    return dense.reshape(grid.shape3)[grid.dims[2] // 2]


def render_fit_report(sink, grid, mask, design, noise, raw, final, tests) -> list:
    """Slice panels, GCV curve, scree plot, and significance maps."""
    written = []

    p = design.p
    fig, axes = plt.subplots(p, 2, figsize=(7.0, 3.0 * p), squeeze=False)
    for j, cname in enumerate(design.names):
        lo = min(raw.beta[j].min(), final.beta[j].min())
        hi = max(raw.beta[j].max(), final.beta[j].max())
        for col, field in enumerate((raw, final)):
            ax = axes[j][col]
            im = ax.imshow(_mid_slice(mask, field.beta[j]), origin="lower",
                           vmin=lo, vmax=hi, cmap="viridis", interpolation="nearest")
            ax.set_title(f"{cname} ({field.label})", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, shrink=0.8)
    fig.suptitle("coefficient maps, middle slice")
    fig.tight_layout()
    path = sink.path("report/beta_slices.png")
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    written.append(path)

    if noise.gcv is not None:
        rows = noise.gcv.as_rows()
        hs = [r[0] for r in rows]
        scores = [r[1] for r in rows]
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot(hs, scores, "o-", ms=4)
        ax.axvline(noise.h_opt, color="crimson", lw=1, ls="--",
                   label=f"selected h = {noise.h_opt:g}")
        ax.set_xscale("log")
        ax.set_xlabel("bandwidth h")
        ax.set_ylabel("GCV score")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = sink.path("report/gcv.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)

    values = noise.eigen.values
    if values.size:
        cum = np.cumsum(values) / values.sum()
        k = np.arange(1, values.size + 1)
        show = min(values.size, 15)
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.bar(k[:show], values[:show], color="steelblue", label="eigenvalue")
        ax2 = ax.twinx()
        ax2.plot(k[:show], cum[:show], "o-", color="darkorange", ms=4,
                 label="cumulative fraction")
        ax2.axhline(noise.eigen.cum_threshold, color="gray", lw=1, ls=":")
        ax2.set_ylim(0, 1.05)
        ax.set_xlabel("component")
        ax.set_ylabel("eigenvalue")
        ax2.set_ylabel("cumulative fraction")
        ax.set_title(f"{noise.eigen.l_s} components retained")
        fig.tight_layout()
        path = sink.path("report/scree.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)

    for name, res in tests.items():
        neglog = -np.log10(np.maximum(res.wald.pvalues, 1e-300))
        fig, ax = plt.subplots(figsize=(4.4, 3.6))
        im = ax.imshow(_mid_slice(mask, neglog), origin="lower", cmap="magma",
                       interpolation="nearest")
        ax.set_title(f"-log10 p, {name} (middle slice)", fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
        path = sink.path(f"report/pvalues_{name}.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)
    return written


def render_study_report(out_dir, table1_rows, table2_rows, result) -> list:
    """Accuracy and power summaries of a replicate study."""
    os.makedirs(os.path.join(out_dir, "report"), exist_ok=True)
    written = []

    if table1_rows:
        scales = sorted({r.scale for r in table1_rows})
        levels = sorted({r.level for r in table1_rows})
        width = 0.8 / len(scales)
        fig, (ax_rms, ax_re) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        xs = np.arange(len(levels))
        for si, s in enumerate(scales):
            rows = {r.level: r for r in table1_rows if r.scale == s}
            rms = [rows[l].rms if l in rows else np.nan for l in levels]
            re = [rows[l].re if l in rows else np.nan for l in levels]
            off = (si - (len(scales) - 1) / 2) * width
            ax_rms.bar(xs + off, rms, width=width, label=f"scale {s}")
            ax_re.plot(xs, re, "o-", ms=4, label=f"scale {s}")
        ax_rms.set_xticks(xs, [f"{l:g}" for l in levels])
        ax_rms.set_xlabel("activation level")
        ax_rms.set_ylabel("RMS of estimate")
        ax_rms.legend(fontsize=8)
        ax_re.axhline(1.0, color="gray", lw=1, ls=":")
        ax_re.set_xticks(xs, [f"{l:g}" for l in levels])
        ax_re.set_xlabel("activation level")
        ax_re.set_ylabel("RMS / mean SD")
        ax_re.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "report", "accuracy.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)

    if table2_rows:
        scales = sorted({r.scale for r in table2_rows})
        levels = sorted({r.level for r in table2_rows})
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for s in scales:
            rows = {r.level: r for r in table2_rows if r.scale == s}
            ax.plot(levels, [rows[l].reject_rate if l in rows else np.nan for l in levels],
                    "o-", ms=4, label=f"scale {s}")
        ax.axhline(0.05, color="gray", lw=1, ls=":")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("activation level")
        ax.set_ylabel("rejection rate")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "report", "power.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)

    if result is not None and result.h_opt.size:
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        hs, counts = np.unique(result.h_opt, return_counts=True)
        ax.bar([f"{h:g}" for h in hs], counts, color="steelblue")
        ax.set_xlabel("selected bandwidth")
        ax.set_ylabel("replicates")
        fig.tight_layout()
        path = os.path.join(out_dir, "report", "bandwidths.png")
        fig.savefig(path, dpi=_DPI)
        plt.close(fig)
        written.append(path)
    return written
