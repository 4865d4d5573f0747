"""Figures written next to the delimited outputs: training curves and metric bars."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import TABLE_COLUMNS, MetricsReport  # noqa: E402

CURVE_KEYS = ("l2", "l1", "kl", "recon_nll")


def training_curves(records: list[dict], path: str | Path, title: str = "") -> Path:
    """Step-wise loss terms (one panel) and per-epoch validation L2 (second panel)."""
    series = defaultdict(lambda: ([], []))
    val_x, val_y = [], []
    for rec in records:
        if "validation_l2" in rec:
            val_x.append(rec["epoch"])
            val_y.append(rec["validation_l2"])
            continue
        for key in CURVE_KEYS:
            if key in rec:
                xs, ys = series[f"{rec.get('kind', '')} {key}".strip()]
                xs.append(rec["step"])
                ys.append(rec[key])
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 3.6))
    for name, (xs, ys) in sorted(series.items()):
        ax_loss.plot(xs, ys, lw=0.8, label=name)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("per-token value")
    if series:
        ax_loss.legend(fontsize=7, frameon=False)
    ax_val.plot(val_x, val_y, marker="o", ms=3)
    if val_y:
        best = max(range(len(val_y)), key=val_y.__getitem__)
        ax_val.axvline(val_x[best], color="grey", ls=":", lw=0.8)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation L2")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(rows: dict[str, MetricsReport], path: str | Path) -> Path:
    """Grouped bars over B-1..R-L, one group per table row."""
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(TABLE_COLUMNS)), 3.6))
    width = 0.8 / max(len(rows), 1)
    for i, (name, rep) in enumerate(rows.items()):
        xs = [j + i * width for j in range(len(TABLE_COLUMNS))]
        ax.bar(xs, rep.row(), width=width, label=name)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(TABLE_COLUMNS))])
    ax.set_xticklabels(TABLE_COLUMNS)
    ax.set_ylabel("score")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
