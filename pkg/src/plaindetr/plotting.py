"""Figures for the report commands. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    # fixed metadata keeps PNG bytes stable between runs
    "svg.hashsalt": "plaindetr",
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def ablation_bars(rows: list[dict], path: Path, metric: str = "AP50") -> Path:
    """Per-arm mean with min/max whiskers. ``rows`` need ``arm``, ``<metric>_mean/_min/_max``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(rows) + 1.5), 3.0))
        names = [r["arm"] for r in rows]
        mean = np.array([r.get(f"{metric}_mean", np.nan) for r in rows], dtype=float)
        lo = np.array([r.get(f"{metric}_min", np.nan) for r in rows], dtype=float)
        hi = np.array([r.get(f"{metric}_max", np.nan) for r in rows], dtype=float)
        x = np.arange(len(rows))
        ax.bar(x, mean, color="#4c72b0", width=0.6)
        ax.errorbar(x, mean, yerr=[mean - lo, hi - mean], fmt="none", ecolor="k", capsize=3, lw=1)
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} per arm (mean, seed range)")
        return _save(fig, path)


def flop_scaling(K: int, M: int, h: int, sides, path: Path) -> Path:
    """Naive vs decomposed bias-path FLOPs on square grids of the given sides."""
    from .costmodel import boxrpb_flops

    sides = list(sides)
    naive, dec = [], []
    for s in sides:
        a, b = boxrpb_flops(K, s, s, M, h)
        naive.append(a.flops)
        dec.append(b.flops)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.loglog(sides, naive, "o-", label="naive")
        ax.loglog(sides, dec, "s-", label="decomposed")
        ax.set_xlabel("grid side")
        ax.set_ylabel("FLOPs")
        ax.set_title(f"bias path, K={K} M={M} h={h}")
        ax.legend()
        return _save(fig, path)


def attention_panel(maps: np.ndarray, path: Path, boxes: np.ndarray | None = None, titles=None) -> Path:
    """Row of heatmaps from (Q, H, W) maps; optional (Q, 4) grid-unit boxes drawn on top."""
    maps = np.asarray(maps)
    n = len(maps)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, max(n, 1), figsize=(1.8 * max(n, 1), 2.0), squeeze=False)
        for i in range(n):
            ax = axes[0, i]
            ax.imshow(maps[i], cmap="magma", origin="upper",
                      extent=(0, maps[i].shape[1], maps[i].shape[0], 0))
            if boxes is not None:
                cx, cy, w, h = boxes[i]
                ax.add_patch(plt.Rectangle((cx - w / 2, cy - h / 2), w, h, fill=False, ec="c", lw=1.2))
            ax.set_xticks([])
            ax.set_yticks([])
            if titles:
                ax.set_title(titles[i], fontsize=8)
        return _save(fig, path)


def loss_curves(histories: dict[str, list[dict]], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for name, hist in histories.items():
            ax.plot([r["epoch"] for r in hist], [r["train_loss"] for r in hist], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax.set_yscale("log")
        if len(histories) > 1:
            ax.legend(fontsize=7)
        return _save(fig, path)
