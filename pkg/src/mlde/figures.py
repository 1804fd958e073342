"""Report figures rendered to vector-graphics files next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .dataset import CLASS_CODES
from .errors import EvaluationError
from .evaluation import BRANCH_LABELS, ENSEMBLE_LABEL, EvaluationReport


def save_roc_figure(report: EvaluationReport, path: str | Path) -> Path:
    """One axes with the seven ensemble ROC curves and the chance diagonal."""
    if not report.roc:
        raise EvaluationError("report carries no ROC points; run `evaluate` first")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 5))
    for code in CLASS_CODES:
        points = report.roc.get(code)
        if not points:
            continue
        ax.plot(points["fpr"], points["tpr"], lw=1.5,
                label=f"{code} (AUC={report.per_task_auc[code]:.3f})")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8, alpha=0.6)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("Ensemble ROC curves, one-vs-rest tasks")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_auc_comparison_figure(report: EvaluationReport, path: str | Path) -> Path:
    """Mean-AUC bars: the ensemble first, then the four individual branches."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = (ENSEMBLE_LABEL,) + BRANCH_LABELS
    values = [report.mean_auc] + list(report.per_branch_mean_auc)
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color=["#33538c"] + ["#8aa2c8"] * len(BRANCH_LABELS))
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, value + 0.01, f"{value:.3f}",
                ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean AUC over the seven tasks")
    ax.set_title("Ensemble vs individual branches")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
