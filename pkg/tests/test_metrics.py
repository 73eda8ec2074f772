import math

import numpy as np
import pytest

from scalevlad.metrics import (
    UndefinedMetricError,
    binary_acc_f1,
    classification_report,
    mae,
    multilabel_report,
    pearson_corr,
    regression_report,
    selection_score,
)


def f1_oracle(pred, true):
    tp = fp = fn = 0
    for p, t in zip(pred, true):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t and not p:
            fn += 1
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def ba_oracle(preds, labels, convention):
    pairs = []
    for p, y in zip(preds, labels):
        if convention == "A":
            pairs.append((p >= 0, y >= 0))
        elif y != 0:
            pairs.append((p >= 0, y > 0))
    acc = sum(a == b for a, b in pairs) / len(pairs)
    return acc, f1_oracle([a for a, _ in pairs], [b for _, b in pairs])


def corr_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _reg_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    labels = np.round(rng.uniform(-3, 3, n) * 2) / 2  # half-steps, so exact zeros occur
    labels[0] = 1.0
    preds = rng.normal(size=n) * 2
    if seed % 4 == 0:
        preds[rng.integers(n)] = 0.0
    return preds, labels


@pytest.mark.parametrize("seed", range(100))
def test_regression_metrics_match_oracles(seed):
    preds, labels = _reg_case(seed)
    for conv in ("A", "B"):
        acc, f1 = binary_acc_f1(preds, labels, conv)
        ref_acc, ref_f1 = ba_oracle(preds.tolist(), labels.tolist(), conv)
        assert abs(acc - ref_acc) <= 1e-9 and abs(f1 - ref_f1) <= 1e-9
    assert abs(mae(preds, labels) - sum(abs(a - b) for a, b in zip(preds, labels)) / len(preds)) <= 1e-9
    assert abs(pearson_corr(preds, labels) - corr_oracle(preds.tolist(), labels.tolist())) <= 1e-9
    rep = regression_report(preds, labels)
    assert rep["BA_A"] == binary_acc_f1(preds, labels, "A")[0]
    if not np.any(labels == 0):
        assert rep["BA_A"] == rep["BA_B"] and rep["F1_A"] == rep["F1_B"]


@pytest.mark.parametrize("seed", range(100))
def test_conventions_agree_without_zero_labels(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 30))
    labels = rng.uniform(0.1, 3, n) * rng.choice([-1, 1], n)
    preds = rng.normal(size=n)
    preds[rng.random(n) < 0.2] = 0.0  # a zero prediction still counts as non-negative in both
    assert binary_acc_f1(preds, labels, "A") == binary_acc_f1(preds, labels, "B")


def test_hand_enumerated_conventions():
    assert binary_acc_f1([-1.0, -1.0, 1.0], [-1.0, 0.0, 1.0], "A")[0] == pytest.approx(2 / 3)
    assert binary_acc_f1([-1.0, -1.0, 1.0], [-1.0, 0.0, 1.0], "B")[0] == 1.0
    assert binary_acc_f1([0.0], [1.0], "A") == binary_acc_f1([0.0], [1.0], "B") == (1.0, 1.0)
    for conv in "AB":
        assert binary_acc_f1([0.5, -2.0, 1.0], [0.5, -2.0, 1.0], conv) == (1.0, 1.0)
    with pytest.raises(UndefinedMetricError):
        binary_acc_f1([1.0, 2.0], [0.0, 0.0], "B")


def test_correlation_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        pearson_corr([1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    assert math.isnan(regression_report([1.0, 1.0], [1.0, -1.0])["Corr"])


@pytest.mark.parametrize("seed", range(100))
def test_multilabel_report_matches_oracle(seed):
    rng = np.random.default_rng(2000 + seed)
    n = int(rng.integers(1, 30))
    logits = rng.normal(size=(n, 8))
    labels = rng.integers(0, 2, size=(n, 4))
    rep = multilabel_report(logits, labels)
    accs, f1s = [], []
    for e, name in enumerate(("happy", "sad", "angry", "neutral")):
        pred = [int(logits[i, 2 * e + 1] > logits[i, 2 * e]) for i in range(n)]
        true = [int(labels[i, e]) for i in range(n)]
        acc = sum(p == t for p, t in zip(pred, true)) / n
        f1 = f1_oracle(pred, true)
        assert abs(rep[f"Acc_{name}"] - acc) <= 1e-9
        assert abs(rep[f"F1_{name}"] - f1) <= 1e-9
        accs.append(acc)
        f1s.append(f1)
    assert abs(rep["Acc_avg"] - sum(accs) / 4) <= 1e-9
    assert abs(rep["F1_avg"] - sum(f1s) / 4) <= 1e-9


def test_classification_report_and_selection():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0], [0.0, 1.0]])
    rep = classification_report(logits, [0, 1, 1, 1])
    assert rep["Acc"] == 0.75
    assert rep["F1"] == pytest.approx(f1_oracle([0, 1, 0, 1], [0, 1, 1, 1]))
    assert selection_score("classification", rep) == rep["F1"]
    assert selection_score("regression", {"MAE": 0.4}) == -0.4


def test_shape_errors():
    with pytest.raises(ValueError):
        mae([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        multilabel_report(np.zeros((2, 6)), np.zeros((2, 4)))
