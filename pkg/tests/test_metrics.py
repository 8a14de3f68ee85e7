import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disaster_stack.errors import DataError
from disaster_stack.labels import ClassLabel
from disaster_stack.metrics import (
    ConfusionMatrix,
    classification_report,
    compare_f1,
    confusion_csv,
    confusion_matrix,
    f1_comparison,
    micro_averages,
    predictions_csv,
    read_predictions_csv,
    render_report,
    report_from_json,
    report_to_json,
)


def tally(truths, preds):
    counts = [[0] * 4 for _ in range(4)]
    for t, p in zip(truths, preds):
        counts[t][p] += 1
    return counts


def ratio_oracle(counts):
    """Per-class (precision, recall, f1, support, undefined) from raw counts."""
    out = []
    for j in range(4):
        tp = counts[j][j]
        col = sum(counts[i][j] for i in range(4))
        row = sum(counts[j])
        p = float(Fraction(tp, col)) if col else 0.0
        r = float(Fraction(tp, row)) if row else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        undefined = tuple(n for n, bad in (("precision", not col), ("recall", not row), ("f1", not p + r)) if bad)
        out.append((p, r, f1, row, undefined))
    return out


matrices = st.lists(st.integers(0, 50), min_size=16, max_size=16).filter(lambda v: sum(v) > 0).map(
    lambda v: np.array(v, dtype=np.int64).reshape(4, 4))


# ----------------------------------------------------------------- confusion


def test_all_correct_is_diagonal():
    cm = confusion_matrix([0, 1, 2, 3, 3], [0, 1, 2, 3, 3])
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 1, 2]))


def test_single_off_diagonal_sample():
    cm = confusion_matrix(["flood"], ["wildfire"])
    assert cm.counts[1, 3] == 1 and cm.total == 1


@pytest.mark.parametrize("seed", range(5))
def test_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, 4, 1000), rng.integers(0, 4, 1000)
    assert confusion_matrix(t, p).counts.tolist() == tally(t.tolist(), p.tolist())


def test_confusion_validation():
    with pytest.raises(DataError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(DataError):
        confusion_matrix([], [])
    with pytest.raises(DataError):
        ConfusionMatrix(np.zeros((3, 3), int))
    with pytest.raises(DataError):
        ConfusionMatrix(-np.eye(4, dtype=int))
    with pytest.raises(DataError):
        ConfusionMatrix(np.eye(4) * 0.5)


# -------------------------------------------------------------------- report


@given(matrices)
@settings(max_examples=200)
def test_report_matches_ratio_oracle(counts):
    cm = ConfusionMatrix(counts)
    report = classification_report(cm)
    for m, (p, r, f1, support, undefined) in zip(report.classes, ratio_oracle(counts.tolist())):
        assert (m.precision, m.recall, m.f1, m.support, m.undefined) == (p, r, f1, support, undefined)
    assert report.accuracy == float(Fraction(int(np.trace(counts)), int(counts.sum())))
    assert sum(m.support for m in report.classes) == cm.total


@given(matrices, st.integers(2, 1000))
def test_scale_equivariance(counts, k):
    a = classification_report(ConfusionMatrix(counts))
    b = classification_report(ConfusionMatrix(counts * k))
    for x, y in zip(a.classes, b.classes):
        assert (x.precision, x.recall, x.f1) == (y.precision, y.recall, y.f1)
    assert a.accuracy == b.accuracy


@given(matrices)
def test_micro_precision_equals_recall_equals_accuracy(counts):
    cm = ConfusionMatrix(counts)
    p, r = micro_averages(cm)
    assert p == r == classification_report(cm).accuracy


def test_perfect_diagonal_is_all_ones():
    report = classification_report(ConfusionMatrix(np.diag([3, 4, 5, 6])))
    assert all((m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0) for m in report.classes)
    assert report.accuracy == 1.0


def test_zero_denominators_flagged():
    counts = np.zeros((4, 4), int)
    counts[0, 0] = 2
    counts[1, 0] = 1  # flood never predicted and never right
    report = classification_report(ConfusionMatrix(counts))
    assert report.by_label("flood").undefined == ("precision", "f1")
    assert report.by_label("volcano").undefined == ("precision", "recall", "f1")
    assert report.by_label("V").f1 == 0.0
    with pytest.raises(DataError):
        classification_report(ConfusionMatrix(np.zeros((4, 4), int)))


def test_f1_spot_check():
    p, r = 0.99, 0.86
    assert round(2 * p * r / (p + r), 2) == 0.92
    # an earthquake row realising P = 8514/8600 and R = 8514/9900 exactly
    counts = np.diag([8514, 50, 50, 50])
    counts[0, 1] = 1386
    counts[1, 0] = 86
    eq = classification_report(ConfusionMatrix(counts)).by_label("E")
    assert (eq.precision, eq.recall) == (0.99, 0.86)
    assert f"{eq.f1:.2f}" == "0.92"


# ------------------------------------------------------------------- exports


def test_compare_f1_rows_and_order():
    reports = [classification_report(ConfusionMatrix(np.diag([5, 5, 5, 5]) + k), name)
               for k, name in ((0, "cnn"), (1, "resnet"), (2, "stack"))]
    header, rows = f1_comparison(reports)
    assert header == ["class", "cnn", "resnet", "stack"]
    assert [r[0] for r in rows] == ["earthquake", "flood", "volcano", "wildfire"]
    for row in rows:
        assert row[1:] == [r.classes[0].f1 for r in reports]
    text = compare_f1(reports)
    assert text.splitlines()[0] == "class,cnn,resnet,stack"
    assert float(text.splitlines()[1].split(",")[2]) == reports[1].classes[0].f1
    single = compare_f1(reports[:1]).splitlines()
    assert all(len(line.split(",")) == 2 for line in single)


def test_compare_f1_reference_values():
    # earthquake rows with F1 0.92 / 0.96 / 0.96 after rounding
    def report(model, tp, fn, fp):
        counts = np.diag([tp, 50, 50, 50])
        counts[0, 1] = fn
        counts[1, 0] = fp
        return classification_report(ConfusionMatrix(counts), model)

    reports = [report("cnn", 86, 14, 1), report("resnet", 96, 4, 4), report("stack", 95, 5, 3)]
    header, rows = f1_comparison(reports)
    assert [f"{v:.2f}" for v in rows[0][1:]] == ["0.92", "0.96", "0.96"]


def stacked_model_matrix():
    supports = [387, 403, 237, 301]
    errors = [20, 20, 13, 13]  # 66 errors of 1328 -> accuracy 0.95
    counts = np.diag(np.array(supports) - np.array(errors))
    for j, e in enumerate(errors):
        counts[j, (j + 1) % 4] += e
    return ConfusionMatrix(counts)


def test_render_report_layout():
    cm = stacked_model_matrix()
    report = classification_report(cm, "Model 3 (stacking)")
    lines = render_report(report).splitlines()
    assert lines[0].split() == ["Model", "Class", "Precision", "Recall", "F1", "Score", "Support", "Accuracy"]
    body = lines[2:]
    assert [l.split()[-1] for l in body[1:]] == ["403", "237", "301"]
    assert body[0].split()[-2:] == ["387", "0.95"]
    assert body[0].startswith("Model 3 (stacking)")
    assert len(body) == 4


def test_render_all_ones():
    text = render_report(classification_report(ConfusionMatrix(np.diag([1, 2, 3, 4])), "m"))
    body = text.splitlines()[2:]
    assert body[0].split() == ["m", "earthquake", "1.00", "1.00", "1.00", "1", "1.00"]
    for line, support in zip(body[1:], (2, 3, 4)):
        assert line.split()[1:] == ["1.00", "1.00", "1.00", str(support)]


@given(matrices)
def test_json_roundtrip_is_exact(counts):
    report = classification_report(ConfusionMatrix(counts), "cnn")
    again = report_from_json(report_to_json(report))
    assert again == report


def test_json_rejects_malformed():
    with pytest.raises(DataError):
        report_from_json('{"model": "x"}')
    good = report_to_json(classification_report(ConfusionMatrix(np.eye(4, dtype=int))))
    doc = json.loads(good)
    doc["classes"] = doc["classes"][::-1]
    with pytest.raises(DataError, match="code order"):
        report_from_json(json.dumps(doc))


def test_confusion_and_prediction_csv(tmp_path):
    cm = confusion_matrix([0, 1, 1], [0, 1, 3])
    lines = confusion_csv(cm).splitlines()
    assert lines[0] == "truth\\pred,earthquake,flood,volcano,wildfire"
    assert lines[2] == "flood,0,1,0,1"
    path = tmp_path / "p.csv"
    path.write_text(predictions_csv([("a", 0, 0), ("b", "F", "wildfire")]))
    assert path.read_text().splitlines()[2] == "b,flood,wildfire"
    assert read_predictions_csv(path) == [("a", ClassLabel.EARTHQUAKE, ClassLabel.EARTHQUAKE),
                                          ("b", ClassLabel.FLOOD, ClassLabel.WILDFIRE)]
    (tmp_path / "bad.csv").write_text("x,y\n")
    with pytest.raises(DataError):
        read_predictions_csv(tmp_path / "bad.csv")
