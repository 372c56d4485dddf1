"""Report figures, rendered to files next to the delimited output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def scatter_figure(path, mos, raw_pred, mapped_pred, report: EvalReport | None = None,
                   title: str = "predictions vs MOS") -> None:
    """Scatter of raw and mapped predictions against MOS, with the fit line."""
    mos = np.asarray(mos, dtype=float)
    raw = np.asarray(raw_pred, dtype=float)
    mapped = np.asarray(mapped_pred, dtype=float)

    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
    axes[0].scatter(raw, mos, s=18, alpha=0.7, edgecolors="none")
    axes[0].set_xlabel("raw prediction")
    axes[0].set_ylabel("MOS")
    axes[0].set_title("raw")

    axes[1].scatter(mapped, mos, s=18, alpha=0.7, edgecolors="none")
    lo = min(float(mapped.min()), float(mos.min()))
    hi = max(float(mapped.max()), float(mos.max()))
    axes[1].plot([lo, hi], [lo, hi], "k--", lw=1, label="identity")
    axes[1].set_xlabel("mapped prediction")
    axes[1].set_title("after logistic mapping")
    axes[1].legend(loc="lower right", fontsize=8)

    if report is not None:
        fig.suptitle(f"{title}  (SROCC {report.srocc:.4f}, PLCC {report.plcc:.4f}, "
                     f"RMSE {report.rmse:.4f}, n={report.n})")
    else:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curve_figure(path, logs) -> None:
    """Per-stage loss curves from the training log rows."""
    stages: dict[str, list[tuple[int, float]]] = {}
    for row in logs:
        stages.setdefault(row.stage, []).append((row.epoch, row.loss))

    fig, ax = plt.subplots(figsize=(7, 4))
    for stage, pts in stages.items():
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                ms=3, lw=1.2, label=stage)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss by stage")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap_figure(path, heatmap: np.ndarray, viewpoints=None) -> None:
    """Heatmap rendering with selected viewpoints overlaid."""
    fig, ax = plt.subplots(figsize=(8, 4))
    im = ax.imshow(heatmap, cmap="magma", aspect="auto")
    fig.colorbar(im, ax=ax, shrink=0.8)
    if viewpoints is not None and len(viewpoints) > 0:
        h, w = heatmap.shape
        xs = (viewpoints.lons() + 180.0) / 360.0 * w - 0.5
        ys = (90.0 - viewpoints.lats()) / 180.0 * h - 0.5
        ax.scatter(xs, ys, s=60, facecolors="none", edgecolors="cyan", lw=1.5)
        for i, (x, y) in enumerate(zip(xs, ys)):
            ax.annotate(str(i), (x, y), color="cyan", fontsize=7,
                        xytext=(3, 3), textcoords="offset points")
    ax.set_title("viewpoint heatmap")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
