"""PNG figures written next to the text reports.

Uses the object-oriented matplotlib API on the Agg canvas, so nothing
touches global pyplot state and no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import rc_context
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .cam import RAMP, HeatMap, render

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def figure_size(columns: int = 1, rows: int = 1, width: float = 3.4) -> tuple[float, float]:
    """Golden-ratio panels, ``width`` inches per column."""
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return width * columns, width * golden * rows


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def parse_metrics_log(path) -> list[dict[str, float]]:
    """One dict per line of a ``key=value`` metrics log."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append({k: float(v) for k, v in (f.split("=", 1) for f in line.split())})
    return rows


def training_curves(rows: list[dict[str, float]], path) -> Path:
    """Per-model cross entropy, distance loss and validation accuracy by epoch."""
    epochs = [r["epoch"] for r in rows]
    m = sum(1 for k in rows[0] if k.startswith("ce_"))
    with rc_context(STYLE):
        fig = Figure(figsize=figure_size(3, 1, 2.6), layout="constrained")
        ax_ce, ax_d, ax_acc = fig.subplots(1, 3)
        for i in range(m):
            ax_ce.plot(epochs, [r[f"ce_{i}"] for r in rows], label=f"model {i}")
            ax_acc.plot(epochs, [r[f"val_acc_{i}"] for r in rows], label=f"model {i}")
        ax_d.plot(epochs, [r["distance"] for r in rows], color="k")
        best = rows[-1]["best_epoch"]
        for ax in (ax_ce, ax_d, ax_acc):
            ax.set_xlabel("epoch")
            if best:
                ax.axvline(best, color="0.6", lw=0.8, ls="--")
        ax_ce.set_ylabel("training cross entropy")
        ax_d.set_ylabel("distance loss")
        ax_acc.set_ylabel("validation accuracy")
        ax_acc.set_ylim(-0.02, 1.02)
        ax_ce.legend(frameon=False)
        return _save(fig, path)


def class_accuracy(report, path) -> Path:
    """Bar chart of per-class accuracy with the overall accuracy as a line."""
    names = list(report.per_class)
    values = [report.per_class[n] for n in names]
    with rc_context(STYLE):
        fig = Figure(figsize=figure_size(max(1, len(names) // 5)), layout="constrained")
        ax = fig.subplots()
        ax.bar(range(len(names)), np.nan_to_num(values), color="0.45")
        ax.axhline(report.accuracy, color="C3", lw=1.0, label=f"overall {report.accuracy:.3f}")
        ax.set_xticks(range(len(names)), names, rotation=45 if len(names) > 4 else 0, ha="right" if len(names) > 4 else "center")
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("accuracy")
        ax.set_title(f"{report.method} on {report.split}")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def cam_panel(image: np.ndarray, heatmaps: list[HeatMap], path, score: float | None = None) -> Path:
    """The input image followed by each model's blended heatmap."""
    image = np.asarray(image, dtype=np.float64)
    shown = image[..., 0] if image.shape[-1] == 1 else image
    with rc_context(STYLE):
        fig = Figure(figsize=(1.6 * (len(heatmaps) + 1), 1.9), layout="constrained")
        axes = fig.subplots(1, len(heatmaps) + 1)
        axes[0].imshow(np.clip(shown, 0, 1), cmap="gray" if shown.ndim == 2 else None, vmin=0, vmax=1)
        axes[0].set_title("input")
        for ax, hm in zip(axes[1:], heatmaps):
            ax.imshow(render(hm, image), interpolation="nearest")
            ax.set_title(f"model {hm.source_model}")
        for ax in axes:
            ax.set_axis_off()
        if score is not None:
            fig.suptitle(f"overlap {score:.3f}")
        return _save(fig, path)


def ramp_strip(path) -> Path:
    """The heatmap colour ramp as a labelled strip."""
    with rc_context(STYLE):
        fig = Figure(figsize=(3.4, 0.6), layout="constrained")
        ax = fig.subplots()
        ax.imshow(RAMP[None], aspect="auto", extent=(0, 1, 0, 1))
        ax.set_yticks([])
        ax.set_xlabel("normalised activation")
        return _save(fig, path)
