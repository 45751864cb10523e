"""Confusion-matrix metrics, confidence intervals, and run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fewbal.errors import InvalidSpecError


def confusion(preds: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    """way x way count matrix, rows = true class, columns = predicted."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise InvalidSpecError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    if len(preds) and (preds.min() < 0 or preds.max() >= way
                       or labels.min() < 0 or labels.max() >= way):
        raise InvalidSpecError("class index out of range")
    cm = np.zeros((way, way), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def accuracy_from_cm(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def precision_recall_f1(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Per-class precision, recall, F1 and their macro-F1 mean.

    Empty denominators (a class never predicted, absent, or with zero
    precision + recall) score 0 rather than NaN.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_totals = cm.sum(axis=0)
    true_totals = cm.sum(axis=1)
    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros_like(tp), where=true_totals > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, float(f1.mean())


def ci95(values: np.ndarray) -> tuple[float, float]:
    """Mean and 95% normal-approximation half width (1.96 * s / sqrt(n))."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        raise InvalidSpecError(f"ci95 needs at least 2 values, got {len(values)}")
    half = 1.96 * values.std(ddof=1) / np.sqrt(len(values))
    return float(values.mean()), float(half)


@dataclass
class TaskScores:
    """Per-task metrics for one run evaluated on one task spec."""

    spec_name: str
    rho: float
    shot_counts: tuple[int, ...] | None  # None when counts vary per task
    accuracies: np.ndarray
    macro_f1s: np.ndarray
    slot_precision: np.ndarray | None = None  # [n_tasks, way]
    slot_recall: np.ndarray | None = None
    task_seeds: list[int] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.accuracies)


@dataclass
class SlotSummary:
    k: int
    precision_mean: float
    precision_ci95: float
    recall_mean: float
    recall_ci95: float


@dataclass
class MetricsRecord:
    """Aggregated view of one spec's evaluation, possibly pooled over runs."""

    spec_name: str
    rho: float
    n_tasks: int
    accuracy_mean: float
    accuracy_ci95: float
    macro_f1_mean: float
    macro_f1_ci95: float
    per_slot: list[SlotSummary]
    per_run_means: list[float] = field(default_factory=list)


def summarize(scores: TaskScores) -> MetricsRecord:
    return aggregate_runs([scores])


def aggregate_runs(runs: list[TaskScores]) -> MetricsRecord:
    """Pool per-task accuracies across runs of the same spec.

    The confidence interval comes from the pooled task-level values; the
    per-run means ride along for inspection.
    """
    if not runs:
        raise InvalidSpecError("nothing to aggregate")
    names = {r.spec_name for r in runs}
    if len(names) > 1:
        raise InvalidSpecError(f"cannot pool different specs: {sorted(names)}")
    acc = np.concatenate([r.accuracies for r in runs])
    f1 = np.concatenate([r.macro_f1s for r in runs])
    acc_mean, acc_half = ci95(acc)
    f1_mean, f1_half = ci95(f1)
    per_slot: list[SlotSummary] = []
    if all(r.shot_counts is not None and r.slot_precision is not None for r in runs):
        counts = {r.shot_counts for r in runs}
        if len(counts) == 1:
            shot_counts = runs[0].shot_counts
            prec = np.concatenate([r.slot_precision for r in runs], axis=0)
            rec = np.concatenate([r.slot_recall for r in runs], axis=0)
            for slot, k in enumerate(shot_counts):
                p_mean, p_half = ci95(prec[:, slot])
                r_mean, r_half = ci95(rec[:, slot])
                per_slot.append(SlotSummary(k, p_mean, p_half, r_mean, r_half))
    return MetricsRecord(
        spec_name=runs[0].spec_name,
        rho=runs[0].rho,
        n_tasks=len(acc),
        accuracy_mean=acc_mean,
        accuracy_ci95=acc_half,
        macro_f1_mean=f1_mean,
        macro_f1_ci95=f1_half,
        per_slot=per_slot,
        per_run_means=[float(r.accuracies.mean()) for r in runs],
    )


def balanced_vs_imbalanced_delta(
    balanced_mean: float, imbalanced_mean: float
) -> tuple[float, float]:
    """Absolute and relative change going from balanced to imbalanced.

    Returns (imbalanced - balanced, (imbalanced - balanced) / balanced).
    """
    if balanced_mean == 0:
        raise InvalidSpecError("balanced mean of zero leaves the relative delta undefined")
    abs_delta = imbalanced_mean - balanced_mean
    return abs_delta, abs_delta / balanced_mean


def record_to_json(record: MetricsRecord) -> dict:
    """Summary schema used by the per-run summary.json files."""
    return {
        "spec": record.spec_name,
        "rho": record.rho,
        "n_tasks": record.n_tasks,
        "accuracy": {"mean": record.accuracy_mean, "ci95": record.accuracy_ci95},
        "macro_f1": {"mean": record.macro_f1_mean, "ci95": record.macro_f1_ci95},
        "per_slot": [
            {
                "k": s.k,
                "precision": {"mean": s.precision_mean, "ci95": s.precision_ci95},
                "recall": {"mean": s.recall_mean, "ci95": s.recall_ci95},
            }
            for s in record.per_slot
        ],
    }
