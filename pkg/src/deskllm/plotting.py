"""Figures written next to the CSV reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.ticker as mticker  # noqa: E402

from .evaluation import PplReport  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def plot_ppl_report(report: PplReport, path: str | Path, train_context: int | None = None) -> Path:
    """Perplexity versus evaluation length, one line per technique set, log-scaled."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label in report.labels:
            pts = sorted((n, p) for n, lab, p in report.rows if lab == label)
            ax.plot([n for n, _ in pts], [p for _, p in pts], marker="o", label=label)
        if train_context:
            ax.axvline(train_context, color="0.5", ls=":", lw=1, label="train context")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xticks(report.lengths)
        ax.set_xticklabels([str(n) for n in report.lengths])
        ax.yaxis.set_major_formatter(mticker.FormatStrFormatter("%g"))
        ax.yaxis.set_minor_formatter(mticker.FormatStrFormatter("%g"))
        ax.set_xlabel("evaluation length (tokens)")
        ax.set_ylabel("perplexity")
        title = " / ".join(x for x in (report.model_id, report.corpus_id) if x)
        if title:
            ax.set_title(title, fontsize=8)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def plot_training_metrics(metrics_csv: str | Path, path: str | Path) -> Path:
    steps, loss, lr = [], [], []
    with open(metrics_csv, newline="") as fh:
        for rec in csv.DictReader(fh):
            steps.append(int(rec["step"]))
            loss.append(float(rec["loss"]))
            lr.append(float(rec["lr"]))
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, loss, lw=1, color="C0")
        ax.set_xlabel("step")
        ax.set_ylabel("train loss (nats)", color="C0")
        ax2 = ax.twinx()
        ax2.plot(steps, lr, lw=1, color="C1")
        ax2.set_ylabel("learning rate", color="C1")
        ax2.grid(False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
