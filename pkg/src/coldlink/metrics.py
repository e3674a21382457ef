"""Classification metrics over scored link predictions: ACC, AUC, Macro-F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScoredPrediction:
    probability: float
    label: int
    task_id: int = -1
    event_id: int = -1


def _split_arrays(preds):
    if not preds:
        raise ValueError("no predictions")
    p = np.asarray([x.probability for x in preds], dtype=np.float64)
    y = np.asarray([x.label for x in preds], dtype=np.int64)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite probability in predictions")
    return p, y


def accuracy(preds, threshold: float = 0.5) -> float:
    p, y = _split_arrays(preds)
    return float(np.mean((p >= threshold).astype(np.int64) == y))


def auc(preds) -> float:
    """Rank-based AUC: probability a random positive outranks a random
    negative, ties counted half. Computed from average ranks in O(n log n)."""
    p, y = _split_arrays(preds)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    order = np.argsort(p, kind="stable")
    ranks = np.empty(len(p))
    sorted_p = p[order]
    i = 0
    while i < len(p):
        j = i
        while j + 1 < len(p) and sorted_p[j + 1] == sorted_p[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def macro_f1(preds, threshold: float = 0.5) -> float:
    """Unweighted mean of the per-class F1 scores for labels {0, 1}.
    A class with no support anywhere contributes 0."""
    p, y = _split_arrays(preds)
    yhat = (p >= threshold).astype(np.int64)
    scores = []
    for cls in (0, 1):
        tp = int(((yhat == cls) & (y == cls)).sum())
        fp = int(((yhat == cls) & (y != cls)).sum())
        fn = int(((yhat != cls) & (y == cls)).sum())
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def metrics_report(preds, threshold: float = 0.5, per_task: bool = False) -> dict:
    """ACC/AUC/Macro-F1 plus counts.

    Pooled by default: all predictions enter one computation. With
    per_task=True each metric is instead the unweighted mean over tasks
    (tasks lacking both classes are skipped for AUC).
    """
    _, y = _split_arrays(preds)
    task_ids = sorted({x.task_id for x in preds})
    if not per_task:
        report = {
            "acc": accuracy(preds, threshold),
            "auc": auc(preds),
            "macro_f1": macro_f1(preds, threshold),
        }
    else:
        accs, aucs, f1s = [], [], []
        for tid in task_ids:
            sub = [x for x in preds if x.task_id == tid]
            labels = {x.label for x in sub}
            accs.append(accuracy(sub, threshold))
            f1s.append(macro_f1(sub, threshold))
            if labels == {0, 1}:
                aucs.append(auc(sub))
        report = {
            "acc": float(np.mean(accs)),
            "auc": float(np.mean(aucs)) if aucs else float("nan"),
            "macro_f1": float(np.mean(f1s)),
        }
    report.update({
        "n_pos": int((y == 1).sum()),
        "n_neg": int((y == 0).sum()),
        "n_tasks": len(task_ids),
    })
    return report
