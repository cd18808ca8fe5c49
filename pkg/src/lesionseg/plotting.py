"""Figures for sweep reports, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import ReportRow  # noqa: E402
from .train import LogRow  # noqa: E402

_PNG_META = {"Software": None}


def plot_report(rows: Sequence[ReportRow], title: str, path) -> Path:
    """Side-by-side bars of mean DSC and rejected percentage per schedule."""
    names = [r.schedule for r in rows]
    x = np.arange(len(rows))
    fig, (ax_dsc, ax_rej) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_dsc.bar(x, [r.mean_dsc for r in rows], color="tab:blue", label="all")
    ids = [r.id_dsc if r.id_dsc is not None else np.nan for r in rows]
    ax_dsc.plot(x, ids, "o", color="black", label="lesion images only")
    ax_dsc.set_ylabel("mean DSC x100")
    ax_dsc.set_ylim(0, 100)
    ax_dsc.legend(loc="lower right", fontsize=8)
    ax_rej.bar(x, [r.rejected_pct for r in rows], color="tab:orange")
    ax_rej.set_ylabel("rejected images (%)")
    ax_rej.set_ylim(0, 100)
    for ax in (ax_dsc, ax_rej):
        ax.set_xticks(x)
        ax.set_xticklabels(names)
    fig.suptitle(title)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return out


def plot_loss_curves(logs: Mapping[str, Sequence[Sequence[LogRow]]], path) -> Path:
    """Training loss against step, averaged over folds, one line per schedule."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, fold_logs in logs.items():
        if not fold_logs:
            continue
        steps = [r.step for r in fold_logs[0]]
        n = min(len(f) for f in fold_logs)
        loss = np.mean([[r.loss for r in f[:n]] for f in fold_logs], axis=0)
        ax.plot(steps[:n], loss, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (fold mean)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return out
