"""Evaluation metrics for regression, classification and multilabel heads.

Binary accuracy for regression outputs comes in two conventions:

* ``"A"``: every sample counts; negative is ``< 0``, non-negative is ``>= 0``.
* ``"B"``: samples whose label is exactly zero are dropped, the rest are
  split as in ``"A"``. Labels left are nonzero, so negative ``< 0`` against
  positive ``> 0``; a prediction of exactly zero counts as positive in both
  conventions, which keeps them identical on data without zero labels.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from .data_io import EMOTIONS


class UndefinedMetricError(ValueError):
    pass


def _as_1d(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _check_pair(preds, labels) -> Tuple[np.ndarray, np.ndarray]:
    p, y = _as_1d(preds), _as_1d(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"predictions ({p.size}) and labels ({y.size}) must be equal-length and nonempty")
    return p, y


def binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    """F1 of the positive class; 0 when there are no positives on either side."""
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def weighted_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    """Support-weighted mean of the two per-class F1 scores."""
    n = true_pos.size
    pos = int(true_pos.sum())
    return (pos * binary_f1(pred_pos, true_pos) + (n - pos) * binary_f1(~pred_pos, ~true_pos)) / n


def binarize(preds, labels, convention: str = "A") -> Tuple[np.ndarray, np.ndarray]:
    p, y = _check_pair(preds, labels)
    if convention == "A":
        return p >= 0, y >= 0
    if convention == "B":
        keep = y != 0
        if not keep.any():
            raise UndefinedMetricError("convention B is undefined when every label is zero")
        return p[keep] >= 0, y[keep] > 0
    raise ValueError(f"unknown convention {convention!r}")


def binary_acc_f1(preds, labels, convention: str = "A") -> Tuple[float, float]:
    pred_pos, true_pos = binarize(preds, labels, convention)
    return float(np.mean(pred_pos == true_pos)), binary_f1(pred_pos, true_pos)


def mae(preds, labels) -> float:
    p, y = _check_pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def pearson_corr(preds, labels) -> float:
    p, y = _check_pair(preds, labels)
    if p.size < 2:
        raise UndefinedMetricError("correlation needs at least two samples")
    pc, yc = p - p.mean(), y - y.mean()
    sp, sy = np.sqrt(np.sum(pc * pc)), np.sqrt(np.sum(yc * yc))
    if sp == 0 or sy == 0:
        raise UndefinedMetricError("correlation undefined for zero-variance input")
    return float(np.sum(pc * yc) / (sp * sy))


def regression_report(preds, labels) -> Dict[str, float]:
    ba_a, f1_a = binary_acc_f1(preds, labels, "A")
    ba_b, f1_b = binary_acc_f1(preds, labels, "B")
    try:
        corr = pearson_corr(preds, labels)
    except UndefinedMetricError:
        corr = float("nan")
    return OrderedDict(
        BA_A=ba_a,
        BA_B=ba_b,
        F1_A=f1_a,
        F1_B=f1_b,
        MAE=mae(preds, labels),
        Corr=corr,
        F1w_A=weighted_f1(*binarize(preds, labels, "A")),
        F1w_B=weighted_f1(*binarize(preds, labels, "B")),
    )


def classification_report(logits, labels) -> Dict[str, float]:
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    pred = logits.argmax(axis=1)
    c = logits.shape[1]
    if c == 2:
        f1 = binary_f1(pred == 1, y == 1)
    else:
        f1 = float(np.mean([binary_f1(pred == k, y == k) for k in range(c)]))
    return OrderedDict(Acc=float(np.mean(pred == y)), F1=f1)


def multilabel_report(logits, labels) -> Dict[str, float]:
    """Per-emotion accuracy and F1 from two-way logit pairs, plus macro means."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_emo = y.shape[1]
    if logits.shape != (y.shape[0], 2 * n_emo):
        raise ValueError(f"expected logits of shape {(y.shape[0], 2 * n_emo)}, got {logits.shape}")
    pairs = logits.reshape(-1, n_emo, 2)
    pred = pairs.argmax(axis=2)
    out = OrderedDict()
    names = EMOTIONS if n_emo == len(EMOTIONS) else [f"e{i}" for i in range(n_emo)]
    accs, f1s = [], []
    for i, name in enumerate(names):
        acc = float(np.mean(pred[:, i] == y[:, i]))
        f1 = binary_f1(pred[:, i] == 1, y[:, i] == 1)
        out[f"Acc_{name}"] = acc
        out[f"F1_{name}"] = f1
        accs.append(acc)
        f1s.append(f1)
    out["Acc_avg"] = float(np.mean(accs))
    out["F1_avg"] = float(np.mean(f1s))
    return out


def task_report(task: str, outputs, labels) -> Dict[str, float]:
    outputs = np.asarray(outputs, dtype=np.float64)
    if task == "regression":
        return regression_report(outputs.reshape(-1), labels)
    if task == "classification":
        return classification_report(outputs, labels)
    return multilabel_report(outputs, labels)


def selection_score(task: str, report: Dict[str, float]) -> float:
    """Higher is better: negative MAE for regression, average F1 otherwise."""
    if task == "regression":
        return -report["MAE"]
    if task == "classification":
        return report["F1"]
    return report["F1_avg"]
