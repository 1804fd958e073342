"""ROC/AUC metrics, seven-task aggregation, prediction export, comparison reports.

AUC uses the Mann-Whitney statistic with the standard tie convention: the
fraction of (positive, negative) pairs where the positive outscores the
negative, counting ties as one half. This exactly equals the trapezoidal area
under the ROC curve, and the test suite holds both routes to each other and
to brute-force pair enumeration. An evaluation set without both classes makes
AUC undefined and is a hard error; silently substituting 0.5 would corrupt
the seven-task mean that rankings are based on.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import CLASS_CODES, DatasetManifest
from .errors import EvaluationError
from .fusion import NUM_BRANCHES

PREDICTIONS_HEADER = ("image",) + CLASS_CODES
BRANCH_LABELS = tuple(f"branch{k + 1}" for k in range(NUM_BRANCHES))
ENSEMBLE_LABEL = "MLDE"


def _scored_set(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise EvaluationError(
            f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise EvaluationError("empty scored set")
    if not np.isfinite(scores).all():
        raise EvaluationError("scores contain non-finite values")
    uniq = set(np.unique(labels).tolist())
    if not uniq <= {0, 1}:
        raise EvaluationError(f"labels must be 0/1, got values {sorted(uniq)}")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"AUC undefined: need at least one positive and one negative "
            f"(got {n_pos} positives, {n_neg} negatives)")
    return scores, pos, n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as 0.5."""
    scores, pos, n_pos, n_neg = _scored_set(scores, labels)
    # Midranks: tied scores share the average of the ranks they occupy.
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    group_start = np.cumsum(counts) - counts  # 0-based rank where each group begins
    midranks = group_start + (counts + 1) / 2.0  # 1-based midrank per group
    rank_sum = float(midranks[inverse][pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, labels):
    """ROC points swept over descending score thresholds, tie groups collapsed.

    Returns (fpr, tpr) arrays starting at (0, 0) and ending at (1, 1); the
    trapezoidal area under them equals auc() to floating-point accuracy.
    """
    scores, pos, n_pos, n_neg = _scored_set(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = pos[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    # keep only the last index of each tie group
    last = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([last, [scores.size - 1]])
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    return fpr, tpr


def trapezoid_area(fpr, tpr) -> float:
    return float(np.trapz(tpr, fpr))


def mean_auc(per_task: Sequence[float]) -> float:
    """Arithmetic mean of exactly seven per-task AUC values."""
    values = np.asarray(per_task, dtype=np.float64).reshape(-1)
    if values.size != len(CLASS_CODES):
        raise EvaluationError(
            f"expected {len(CLASS_CODES)} AUC values, got {values.size}")
    if ((values < 0) | (values > 1)).any() or not np.isfinite(values).all():
        raise EvaluationError(f"AUC values must lie in [0, 1], got {values.tolist()}")
    return float(values.mean())


@dataclass
class ScoreTable:
    """Per-image fused and per-branch scores for all seven models."""

    image_ids: list[str]
    fused: np.ndarray          # (N, 7), canonical class order
    branch: np.ndarray         # (N, 7, 4)
    labels: list[str | None] = field(default_factory=list)


@dataclass
class PredictionTable:
    image_ids: list[str]
    scores: np.ndarray         # (N, 7) fused probabilities


def score_manifest(models: Mapping[str, "TrainedModel"], manifest: DatasetManifest,
                   batch_size: int = 32, workers: int = 1) -> ScoreTable:
    """Run all seven ensembles over a manifest, keeping branch-level scores.

    Each image's pyramid is computed once and shared by the seven models;
    rows come back in manifest order.
    """
    import torch

    from .training import PyramidLoader

    missing = [code for code in CLASS_CODES if code not in models]
    if missing:
        raise EvaluationError(f"missing model for class(es): {', '.join(missing)}")
    configs = {code: models[code].config for code in CLASS_CODES}
    reference = configs[CLASS_CODES[0]]
    for code, cfg in configs.items():
        if (cfg.scales, cfg.norm_mean, cfg.norm_std, cfg.backbone) != (
                reference.scales, reference.norm_mean, reference.norm_std,
                reference.backbone):
            raise EvaluationError(
                f"model {code} was trained under a different imaging "
                f"configuration than {CLASS_CODES[0]}")

    loader = PyramidLoader(manifest.root(), reference.scales,
                           reference.norm_mean, reference.norm_std,
                           reference.pyramid_cache_mb)
    n = len(manifest.entries)
    fused = np.zeros((n, len(CLASS_CODES)), dtype=np.float64)
    branch = np.zeros((n, len(CLASS_CODES), NUM_BRANCHES), dtype=np.float64)
    for code in CLASS_CODES:
        models[code].model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            entries = manifest.entries[start:start + batch_size]
            pyramids = loader.batch(entries, workers=workers)
            for t, code in enumerate(CLASS_CODES):
                fused_t, probs_t = models[code].model(pyramids)
                fused[start:start + len(entries), t] = fused_t.numpy()
                branch[start:start + len(entries), t, :] = probs_t.numpy()
    return ScoreTable(
        image_ids=[e.image_id for e in manifest.entries],
        fused=fused,
        branch=branch,
        labels=[e.label.code if e.label else None for e in manifest.entries],
    )


def predict_dataset(models: Mapping[str, "TrainedModel"], manifest: DatasetManifest,
                    batch_size: int = 32, workers: int = 1) -> PredictionTable:
    """Fused probabilities per image, one column per class in canonical order.

    Rows are independent binary scores and are deliberately not normalized
    across classes.
    """
    table = score_manifest(models, manifest, batch_size=batch_size, workers=workers)
    return PredictionTable(image_ids=table.image_ids, scores=table.fused)


def write_predictions_csv(table: PredictionTable, path: str | Path) -> Path:
    """Challenge-format CSV: header ``image,MEL,...``, 6-decimal probabilities."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for image_id, row in zip(table.image_ids, table.scores):
            writer.writerow([image_id] + [f"{v:.6f}" for v in row])
    return path


def read_predictions_csv(path: str | Path) -> PredictionTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != PREDICTIONS_HEADER:
            raise EvaluationError(
                f"bad predictions header {header!r}; expected "
                f"{','.join(PREDICTIONS_HEADER)}")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    scores = (np.asarray(rows, dtype=np.float64) if rows
              else np.zeros((0, len(CLASS_CODES))))
    return PredictionTable(image_ids=ids, scores=scores)


@dataclass
class EvaluationReport:
    """Per-task AUCs, their mean, and the branch-vs-ensemble comparison."""

    per_task_auc: dict[str, float]
    mean_auc: float
    per_task_branch_auc: dict[str, list[float]]
    per_branch_mean_auc: list[float]
    ensemble_not_worse: bool
    n_images: int = 0
    roc: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=1, sort_keys=True)
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "EvaluationReport":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(**data)


def compare_report(ensemble_aucs: Mapping[str, float],
                   branch_aucs: Mapping[str, Sequence[float]]
                   ) -> tuple[EvaluationReport, str]:
    """Build the comparison report and its rendered table from AUC maps.

    Both maps must cover the same seven tasks (same evaluation set).
    """
    if set(ensemble_aucs) != set(CLASS_CODES) or set(branch_aucs) != set(CLASS_CODES):
        raise EvaluationError(
            "ensemble and branch AUC maps must both cover exactly the seven "
            f"classes {CLASS_CODES}")
    per_task = {code: float(ensemble_aucs[code]) for code in CLASS_CODES}
    per_task_branch = {code: [float(v) for v in branch_aucs[code]]
                       for code in CLASS_CODES}
    for code, values in per_task_branch.items():
        if len(values) != NUM_BRANCHES:
            raise EvaluationError(
                f"task {code}: expected {NUM_BRANCHES} branch AUCs, got {len(values)}")
    overall = mean_auc([per_task[c] for c in CLASS_CODES])
    branch_means = [
        float(np.mean([per_task_branch[c][k] for c in CLASS_CODES]))
        for k in range(NUM_BRANCHES)
    ]
    report = EvaluationReport(
        per_task_auc=per_task,
        mean_auc=overall,
        per_task_branch_auc=per_task_branch,
        per_branch_mean_auc=branch_means,
        ensemble_not_worse=all(overall >= b for b in branch_means),
    )
    return report, render_comparison_table(report)


def render_comparison_table(report: EvaluationReport) -> str:
    """Aligned text table, columns MLDE then branch1..branch4."""
    columns = (ENSEMBLE_LABEL,) + BRANCH_LABELS
    width = max(len(c) for c in columns + ("mean AUC",)) + 2
    lines = ["Task".ljust(8) + "".join(c.rjust(width) for c in columns)]
    for code in CLASS_CODES:
        row = [report.per_task_auc[code]] + list(report.per_task_branch_auc[code])
        lines.append(code.ljust(8) + "".join(f"{v:{width}.4f}" for v in row))
    mean_row = [report.mean_auc] + list(report.per_branch_mean_auc)
    lines.append("mean".ljust(8) + "".join(f"{v:{width}.4f}" for v in mean_row))
    verdict = ("ensemble mean AUC >= every individual branch"
               if report.ensemble_not_worse
               else "ensemble mean AUC is below at least one branch")
    lines.append(verdict)
    return "\n".join(lines)


def write_report_csv(report: EvaluationReport, path: str | Path) -> Path:
    """Delimited form of the comparison table (one row per task plus mean)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("task", ENSEMBLE_LABEL) + BRANCH_LABELS)
        for code in CLASS_CODES:
            writer.writerow([code, f"{report.per_task_auc[code]:.6f}"]
                            + [f"{v:.6f}" for v in report.per_task_branch_auc[code]])
        writer.writerow(["mean", f"{report.mean_auc:.6f}"]
                        + [f"{v:.6f}" for v in report.per_branch_mean_auc])
    return path


def evaluate_models(models: Mapping[str, "TrainedModel"], manifest: DatasetManifest,
                    batch_size: int = 32, workers: int = 1) -> EvaluationReport:
    """Score a labeled manifest and produce the full comparison report."""
    labeled_idx = [i for i, e in enumerate(manifest.entries) if e.label is not None]
    if not labeled_idx:
        raise EvaluationError("evaluation manifest has no labeled entries")
    table = score_manifest(models, manifest, batch_size=batch_size, workers=workers)
    labels = [table.labels[i] for i in labeled_idx]
    fused = table.fused[labeled_idx]
    branch = table.branch[labeled_idx]

    ensemble_aucs: dict[str, float] = {}
    branch_aucs: dict[str, list[float]] = {}
    roc: dict[str, dict[str, list[float]]] = {}
    for t, code in enumerate(CLASS_CODES):
        y = np.array([1 if lab == code else 0 for lab in labels])
        try:
            ensemble_aucs[code] = auc(fused[:, t], y)
        except EvaluationError as exc:
            raise EvaluationError(f"task {code}: {exc}") from exc
        branch_aucs[code] = [auc(branch[:, t, k], y) for k in range(NUM_BRANCHES)]
        fpr, tpr = roc_curve(fused[:, t], y)
        roc[code] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}

    report, _ = compare_report(ensemble_aucs, branch_aucs)
    report.n_images = len(labeled_idx)
    report.roc = roc
    return report
