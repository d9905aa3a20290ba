import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jacfuse.errors import AllUndefined, LengthMismatch
from jacfuse.evaluate import (
    MODEL_ROWS,
    ablation_reports,
    confusion_matrix,
    format_table,
    macro_metrics,
    metrics_report,
    per_class_rates,
    write_class_bars,
    write_curve,
    write_report,
)
from jacfuse.fusion import EnsemblePrediction


def test_perfect_predictions_diagonal():
    y = [0, 1, 2, 3, 3, 1]
    cm = confusion_matrix(y, y)
    assert np.array_equal(cm, np.diag([1, 2, 1, 2]))
    tpr, tnr = per_class_rates(cm)
    assert np.all(tpr == 1) and np.all(tnr == 1)
    assert macro_metrics(cm) == (1.0, 1.0, 1.0)


def test_all_predicted_zero_single_column():
    cm = confusion_matrix([0, 1, 2, 3], [0, 0, 0, 0])
    assert np.array_equal(cm[:, 0], [1, 1, 1, 1]) and cm[:, 1:].sum() == 0


def test_hand_counted_eight_samples():
    actual = [0, 0, 1, 1, 2, 3, 3, 2]
    pred = [0, 1, 1, 1, 3, 3, 2, 2]
    expected = np.array([[1, 1, 0, 0], [0, 2, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])
    assert np.array_equal(confusion_matrix(actual, pred), expected)


def test_length_and_range_checks():
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_matrix([0, 4], [0, 1])


def test_padded_two_class_example():
    cm = np.zeros((4, 4), int)
    cm[:2, :2] = [[3, 1], [2, 4]]
    tpr, tnr = per_class_rates(cm)
    assert tpr[0] == 0.75 and tpr[1] == pytest.approx(2 / 3, abs=1e-15)
    assert tnr[0] == pytest.approx(2 / 3, abs=1e-15) and tnr[1] == 0.75
    # absent classes: sensitivity has a zero denominator; specificity still has TN+FP = 10
    assert np.isnan(tpr[2:]).all()
    assert np.all(tnr[2:] == 1.0)
    sens, _, acc = macro_metrics(cm)
    assert sens == pytest.approx((0.75 + 2 / 3) / 2, abs=1e-15)
    assert acc == 0.7


def test_macro_excludes_undefined():
    # class 0: 1 of 2 correct, class 1: 2 of 2, classes 2 and 3 absent
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1])
    assert macro_metrics(cm)[0] == 0.75


def test_all_undefined():
    with pytest.raises(AllUndefined):
        macro_metrics(np.zeros((4, 4), int))


def binary_oracle(cm, i):
    """Collapse to a 2x2 problem (class i vs the rest) and read the rates off it."""
    n = cm.shape[0]
    tp = fn = fp = tn = 0
    for a in range(n):
        for p in range(n):
            c = int(cm[a, p])
            if a == i and p == i:
                tp += c
            elif a == i:
                fn += c
            elif p == i:
                fp += c
            else:
                tn += c
    tpr = tp / (tp + fn) if tp + fn else None
    tnr = tn / (tn + fp) if tn + fp else None
    return tpr, tnr


def test_one_vs_rest_matches_binary_oracle():
    r = np.random.default_rng(2024)
    for _ in range(100):
        cm = r.integers(0, 6, (4, 4)) * (r.random((4, 4)) < 0.7)
        tpr, tnr = per_class_rates(cm)
        for i in range(4):
            o_tpr, o_tnr = binary_oracle(cm, i)
            assert (np.isnan(tpr[i]) and o_tpr is None) or tpr[i] == o_tpr
            assert (np.isnan(tnr[i]) and o_tnr is None) or tnr[i] == o_tnr


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_report_invariants(pairs):
    a, p = zip(*pairs)
    rep = metrics_report("x", a, p)
    assert rep.confusion.sum() == len(pairs)
    assert rep.accuracy == np.mean(np.array(a) == np.array(p))
    for v in (rep.sensitivity, rep.specificity):
        d = v[~np.isnan(v)]
        assert np.all((d >= 0) & (d <= 1))


def fake_prediction(i, actual, rng):
    ps = [rng.dirichlet(np.ones(4)) for _ in range(3)]
    agg = (ps[0] + ps[1] + ps[2]) / 3
    return EnsemblePrediction(f"s{i}", ps[0], ps[1], ps[2], agg, int(np.argmax(agg)), None, None, actual)


def test_ablation_rows_and_outputs(tmp_path, rng):
    preds = [fake_prediction(i, i % 4, rng) for i in range(12)]
    reports = ablation_reports(preds)
    assert [r.name for r in reports] == list(MODEL_ROWS) == ["CNN", "RF-CT", "RF-MRI", "ELF"]
    assert reports[0].accuracy == np.mean([np.argmax(p.p_cnn) == p.actual for p in preds])
    table = format_table(reports)
    assert len(table.strip().splitlines()) == 2 + 4
    write_report(reports, tmp_path / "m.json", seed=3)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["seed"] == 3 and [r["name"] for r in doc["rows"]] == list(MODEL_ROWS)
    write_class_bars(reports[-1], tmp_path / "bars.csv")
    rows = list(csv.reader(open(tmp_path / "bars.csv")))
    assert rows[0] == ["class", "sensitivity", "specificity"] and len(rows) == 5


def test_curve_csv(tmp_path):
    write_curve([{"epoch": 1, "loss": 1.5, "accuracy": 0.25, "val_loss": 1.4, "val_accuracy": 0.5}], tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["epoch", "loss", "accuracy", "val_loss", "val_accuracy"]
    assert rows[1] == ["1", "1.5", "0.25", "1.4", "0.5"]
