"""Figures for the report stage, rendered straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

from .errors import InputError
from .evaluation import DetectionReport


def plot_rank_box(gold_ranks: dict[str, int], path: str | Path,
                  pool_size: int | None = None) -> None:
    """Box plot of the ranks planted terms achieved, with the raw points."""
    if not gold_ranks:
        raise InputError("no gold ranks to plot")
    vals = sorted(gold_ranks.values())
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.boxplot([vals], widths=0.45, medianprops={"color": "firebrick"})
    ax.plot([1.0] * len(vals), vals, "o", ms=4, alpha=0.6, color="steelblue")
    ax.set_xticks([1])
    ax.set_xticklabels(["planted terms"])
    ax.set_ylabel("rank (1 = best)")
    if pool_size:
        ax.axhline(pool_size, ls=":", lw=1, color="gray")
        ax.annotate(f"pool size {pool_size}", (0.55, pool_size),
                    fontsize=8, color="gray", va="bottom")
    ax.set_title("Detection rank of planted terms")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_curves(metrics: list[dict], path: str | Path) -> None:
    """Precision (per mille) and recall against the ranking cutoff k."""
    if not metrics:
        raise InputError("no metric rows to plot")
    ks = [m["k"] for m in metrics]
    prec = [m["precision_permille"] for m in metrics]
    rec = [m["recall"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.5))
    ax1.plot(ks, prec, marker="o", color="steelblue")
    ax1.set_xlabel("top k terms")
    ax1.set_ylabel("precision (per mille)")
    ax1.set_title("Precision")
    ax2.plot(ks, rec, marker="o", color="seagreen")
    ax2.set_xlabel("top k terms")
    ax2.set_ylabel("recall")
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_title("Recall of planted occurrences")
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_figures(report: DetectionReport,
                          outdir: str | Path) -> list[Path]:
    """Write whatever figures the report has data for; returns the paths."""
    outdir = Path(outdir)
    written: list[Path] = []
    if report.gold_ranks:
        p = outdir / "fig_ranks.png"
        plot_rank_box(report.gold_ranks, p,
                      pool_size=report.meta.get("n_candidates"))
        written.append(p)
    if report.metrics:
        p = outdir / "fig_metrics.png"
        plot_metric_curves(report.metrics, p)
        written.append(p)
    return written
