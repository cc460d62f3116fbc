# test_metrics.py

import math

import numpy as np
import pytest
from sklearn.metrics import f1_score, roc_auc_score

from src.errors import InputError
from src.metrics import (
    EvalRow,
    MetricsReport,
    REPORT_COLUMNS,
    accuracy,
    auroc,
    f1_macro,
    f1_macro_multilabel,
    read_config_hash,
)


def brute_force_f1(preds, labels, n_classes):
    scores = []
    for c in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / n_classes


def brute_force_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_accuracy():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
    assert accuracy(np.array([[1, 0], [1, 1]]), np.array([[1, 0], [0, 1]])) == 0.5
    with pytest.raises(InputError):
        accuracy([], [])
    with pytest.raises(InputError):
        accuracy([0, 1], [0])


def test_f1_anchors():
    assert f1_macro([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert f1_macro([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(InputError):
        f1_macro([], [], 2)
    with pytest.raises(InputError):
        f1_macro([0, 3], [0, 1], 3)


def test_f1_random_cases_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_classes = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        preds, labels = rng.integers(0, n_classes, n), rng.integers(0, n_classes, n)
        ours = f1_macro(preds, labels, n_classes)
        assert ours == pytest.approx(brute_force_f1(preds.tolist(), labels.tolist(), n_classes), abs=1e-12)
        reference = f1_score(labels, preds, labels=list(range(n_classes)), average="macro", zero_division=0)
        assert ours == pytest.approx(reference, abs=1e-12)


def test_multilabel_f1_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(20):
        preds, labels = rng.integers(0, 2, (15, 4)), rng.integers(0, 2, (15, 4))
        reference = f1_score(labels, preds, average="macro", zero_division=0)
        assert f1_macro_multilabel(preds, labels) == pytest.approx(reference, abs=1e-12)


def test_auroc_anchors():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(InputError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_random_cases_match_oracles():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # Coarse scores so ties occur.
        scores = rng.integers(0, 5, n) / 4.0
        ours = auroc(scores, labels)
        assert ours == pytest.approx(brute_force_auroc(scores.tolist(), labels.tolist()), abs=1e-12)
        assert ours == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def make_report():
    report = MetricsReport(trainable_params=10, total_params=100)
    report.add(EvalRow(0, "test/both", 0.7, 0.69, 0.5, 1 / 3, None, 0.01))
    report.add(EvalRow(1, "test/both", 0.7, 0.5, 0.75, 0.7, 0.8, 0.02))
    return report


def test_report_rejects_out_of_range_metric():
    report = MetricsReport()
    with pytest.raises(InputError):
        report.add(EvalRow(0, "val/both", 0.5, 1.0, 1.5, 0.5, None, 0.0))


def test_report_lookup():
    report = make_report()
    assert [r.epoch for r in report.last_epoch()] == [1]
    assert report.find(0, "test/both").auroc is None
    with pytest.raises(KeyError):
        report.find(2, "test/both")


def test_report_csv(tmp_path):
    report = make_report()
    path = tmp_path / "cells" / "report.csv"
    report.to_csv(path, "abc123")

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == ",".join(REPORT_COLUMNS)
    assert lines[2].split(",")[6] == ""
    assert read_config_hash(path) == "abc123"

    loaded = MetricsReport.from_csv(path)
    assert loaded.rows[0].auroc is None
    assert loaded.rows[1].auroc == 0.8
    assert math.isclose(loaded.rows[0].f1_macro, 1 / 3, rel_tol=1e-9)


def test_read_config_hash_needs_header(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("epoch\n0\n", encoding="utf-8")
    with pytest.raises(InputError):
        read_config_hash(path)
