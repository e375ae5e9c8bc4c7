"""Figures for ablation reports and training logs (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
OURS, PUBLISHED = "#1f77b4", "#bbbbbb"


def _bars(ax, labels, ours, published, ylabel):
    x = np.arange(len(labels))
    w = 0.38
    ax.bar(x - w / 2, ours, w, color=OURS, label="computed")
    ax.bar(x + w / 2, published, w, color=PUBLISHED, label="published")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)


def ablation_figure(table: str, records: list[dict], path: str | Path) -> Path:
    path = Path(path)
    labels = [r["row"] for r in records]
    with plt.rc_context(STYLE):
        if table == "asa":
            fig, ax = plt.subplots(figsize=(4.5, 3.2))
            _bars(ax, labels, [r["attention_ratio"] for r in records],
                  [r["published_attention_ratio"] for r in records], "attention FLOPs / full attention")
            ax.set_ylim(0, 1.1)
        else:
            fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
            _bars(a1, labels, [r["flops_G"] for r in records], [r["published_flops_G"] for r in records], "GFLOPs")
            _bars(a2, labels, [r["params_M"] for r in records], [r["published_params_M"] for r in records], "Params (M)")
            ax = a1
        ax.legend(frameon=False)
        fig.suptitle(f"ablation: {table}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def loss_figure(records: list[dict], path: str | Path) -> Path:
    path = Path(path)
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(steps, [r["rf_loss"] for r in records], lw=0.8, color=OURS, label="rf_loss")
        repa = [r.get("repa_loss") for r in records]
        if any(v is not None for v in repa):
            ax.plot(steps, [np.nan if v is None else v for v in repa], lw=0.8, color="#d62728", label="repa_loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
