import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disaster_stack.ensemble import (
    ArgmaxRecord,
    StackedRecord,
    argmax_labels,
    build_stacked_dataset,
    features,
    gbt_predict,
    grid_search_cv,
    read_argmax_csv,
    read_stacked_csv,
    stack_predictions,
    stratified_folds,
    stratified_row_split,
    train_gbt,
    train_logreg_baseline,
    write_argmax_csv,
    write_grid_csv,
    write_stacked_csv,
)
from disaster_stack.errors import DataError
from disaster_stack.gbt import GBTConfig
from disaster_stack.labels import ClassLabel
from disaster_stack.train import ArraySplit

E, F, V, W = ClassLabel

WORKED_ROWS = [
    ((0.95, 0.02, 0.01, 0.02), (0.96, 0.0, 0.03, 0.01), "E"),
    ((0.0, 0.01, 0.0, 0.99), (0.01, 0.0, 0.0, 0.99), "W"),
]


def lookup_records(truth_of, reps=5):
    return [ArgmaxRecord(ClassLabel(a), ClassLabel(b), ClassLabel(truth_of(a, b)))
            for a, b in itertools.product(range(4), range(4)) for _ in range(reps)]


# ------------------------------------------------------------------ stacking


def test_worked_rows_stack_exactly():
    records = stack_predictions([r[0] for r in WORKED_ROWS], [r[1] for r in WORKED_ROWS], [r[2] for r in WORKED_ROWS])
    assert records[0] == StackedRecord((0.95, 0.02, 0.01, 0.02), (0.96, 0.0, 0.03, 0.01), E)
    assert records[1].truth is W


def test_worked_rows_argmax_labels():
    stacked = stack_predictions([r[0] for r in WORKED_ROWS], [r[1] for r in WORKED_ROWS], [r[2] for r in WORKED_ROWS])
    assert argmax_labels(stacked) == [ArgmaxRecord(E, E, E), ArgmaxRecord(W, W, W)]


def test_uniform_row_ties_to_lowest_code():
    stacked = stack_predictions([[0.25] * 4], [[0.0, 0.5, 0.5, 0.0]], ["V"])
    assert argmax_labels(stacked) == [ArgmaxRecord(E, F, V)]


@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 0.1),
       st.floats(0.01, 100.0))
def test_argmax_is_scale_invariant(row, scale):
    p = np.array(row) / sum(row)
    a = argmax_labels([StackedRecord(tuple(p), tuple(p), E)])[0]
    b = argmax_labels([StackedRecord(tuple(p * scale), tuple(p * scale), E)])[0]
    assert a == b


def test_stack_validation():
    with pytest.raises(DataError, match="row 1 sums"):
        stack_predictions([[0.25] * 4, [0.5, 0.5, 0.5, 0.0]], [[0.25] * 4] * 2, "EE")
    with pytest.raises(DataError, match="negative"):
        stack_predictions([[1.1, -0.1, 0, 0]], [[0.25] * 4], "E")
    with pytest.raises(DataError, match="row counts"):
        stack_predictions([[0.25] * 4], [[0.25] * 4] * 2, "E")
    with pytest.raises(DataError, match=r"\(N, 4\)"):
        stack_predictions([[0.5, 0.5]], [[0.25] * 4], "E")
    # within tolerance is accepted
    stack_predictions([[0.25, 0.25, 0.25, 0.250004]], [[0.25] * 4], "E")


class FixedModel:
    def __init__(self, probs):
        self.probs = probs

    def predict_proba(self, images):
        return self.probs[: len(images)]


def test_build_stacked_dataset_counts_and_empty():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=7)
    split = ArraySplit(np.zeros((7, 2, 2, 3)), np.arange(7) % 4)
    records = build_stacked_dataset(FixedModel(p), FixedModel(p[::-1]), split)
    assert len(records) == 7
    assert records[3].p2 == tuple(p[3])
    assert [int(r.truth) for r in records] == [0, 1, 2, 3, 0, 1, 2]
    empty = ArraySplit(np.zeros((0, 2, 2, 3)), np.zeros(0))
    assert build_stacked_dataset(FixedModel(p), FixedModel(p), empty) == []


def test_feature_modes():
    stacked = stack_predictions([r[0] for r in WORKED_ROWS], [r[1] for r in WORKED_ROWS], "EW")
    X, y = features(stacked, "argmax")
    assert X.tolist() == [[0, 0], [3, 3]] and y.tolist() == [0, 3]
    X, _ = features(stacked, "onehot")
    assert X.tolist()[1] == [0, 0, 0, 1, 0, 0, 0, 1]
    X, _ = features(stacked, "proba")
    assert X.shape == (2, 8) and X[0, 4] == 0.96
    with pytest.raises(DataError):
        features(argmax_labels(stacked), "proba")
    with pytest.raises(ValueError):
        features(stacked, "bogus")


# ----------------------------------------------------------------- meta-models


def test_train_gbt_and_predict():
    records = lookup_records(lambda a, b: a if a == b else b)
    model = train_gbt(records, GBTConfig(n_rounds=50, max_depth=4, learning_rate=0.3))
    for a, b in itertools.product(range(4), range(4)):
        probs, label = gbt_predict(model, a, b)
        assert label == (a if a == b else b)
        assert abs(probs.sum() - 1) < 1e-6
    probs, label = gbt_predict(model, "Flood", "F")
    assert label is F
    with pytest.raises(DataError, match="empty"):
        train_gbt([], GBTConfig())


def test_logreg_separable_and_monotone():
    records = lookup_records(lambda a, b: b)
    model = train_logreg_baseline(records, lr=0.5, iterations=300)
    X, y = features(records, "onehot")
    assert np.mean(model.predict(X) == y) == 1.0
    trace = np.array(model.loss_trace)
    assert trace[0] == pytest.approx(math.log(4))
    assert np.all(np.diff(trace) <= 1e-12)


def test_logreg_zero_iterations_uniform():
    model = train_logreg_baseline(lookup_records(lambda a, b: a), iterations=0)
    np.testing.assert_array_equal(model.predict_proba(np.eye(8)[:2]), [[0.25] * 4] * 2)
    with pytest.raises(DataError, match="empty"):
        train_logreg_baseline([])


# ---------------------------------------------------------------- grid search


def test_stratified_folds_balance():
    y = np.repeat(np.arange(4), [10, 11, 12, 13])
    folds = stratified_folds(y, 5, seed=0)
    for c in range(4):
        counts = np.bincount(folds[y == c], minlength=5)
        assert counts.max() - counts.min() <= 1


def test_stratified_row_split_sizes():
    y = np.repeat(np.arange(4), [10, 11, 12, 13])
    train, test = stratified_row_split(y, 0.8, seed=1)
    assert sorted(train + test) == list(range(46))
    assert [int(np.sum(y[train] == c)) for c in range(4)] == [8, 9, 10, 10]
    assert stratified_row_split(y, 0.8, 1) == (train, test)


def test_grid_table_enumerates_product():
    records = lookup_records(lambda a, b: (a + b) % 4, reps=3)
    grid = {"max_depth": [1, 2, 3], "learning_rate": [0.1, 0.3], "subsample": [1.0]}
    result = grid_search_cv(records, grid, k_folds=3, base=GBTConfig(n_rounds=3))
    assert len(result.table) == 3 * 2 * 1
    assert [(r["max_depth"], r["learning_rate"]) for r in result.table] == list(
        itertools.product([1, 2, 3], [0.1, 0.3]))
    assert all(len(r["fold_accuracies"]) == 3 for r in result.table)


def test_default_grid_has_36_rows():
    records = lookup_records(lambda a, b: a, reps=2)
    result = grid_search_cv(records, k_folds=2, base=GBTConfig(n_rounds=1))
    assert len(result.table) == 3 * 3 * 2 * 2


def test_single_config_grid():
    records = lookup_records(lambda a, b: a, reps=3)
    result = grid_search_cv(records, {"max_depth": [3]}, k_folds=3, base=GBTConfig(n_rounds=5))
    assert result.best_config.max_depth == 3
    assert result.best_config.n_rounds == 5


def test_dominant_config_selected():
    # An interaction target that stumps cannot fit but depth-3 trees can.
    records = lookup_records(lambda a, b: (a + b) % 4, reps=5)
    grid = {"max_depth": [1, 3], "n_rounds": [0, 40]}
    result = grid_search_cv(records, grid, k_folds=5, base=GBTConfig(learning_rate=0.3))
    rows = {(r["max_depth"], r["n_rounds"]): r["fold_accuracies"] for r in result.table}
    best = rows[(3, 40)]
    for key, accs in rows.items():
        if key != (3, 40):
            assert all(b > a for a, b in zip(accs, best))
    assert (result.best_config.max_depth, result.best_config.n_rounds) == (3, 40)


def test_ties_go_to_first_config():
    records = lookup_records(lambda a, b: a, reps=3)
    result = grid_search_cv(records, {"n_rounds": [0, 0]}, k_folds=3)
    assert result.table[0]["mean_accuracy"] == result.table[1]["mean_accuracy"]
    assert result.best_config.n_rounds == 0


def test_grid_search_errors():
    records = lookup_records(lambda a, b: a, reps=1)
    with pytest.raises(ValueError):
        grid_search_cv(records, {}, k_folds=2)
    with pytest.raises(ValueError):
        grid_search_cv(records, {"max_depth": []}, k_folds=2)
    with pytest.raises(ValueError):
        grid_search_cv(records, {"depth": [1]}, k_folds=2)
    with pytest.raises(ValueError):
        grid_search_cv(records, {"max_depth": [1]}, k_folds=1)
    with pytest.raises(DataError):
        grid_search_cv(records[:3], {"max_depth": [1]}, k_folds=5)


def test_grid_search_is_deterministic():
    records = lookup_records(lambda a, b: (a * b) % 4, reps=3)
    grid = {"subsample": [0.8], "max_depth": [2]}
    a = grid_search_cv(records, grid, k_folds=3, base=GBTConfig(n_rounds=5), seed=4)
    b = grid_search_cv(records, grid, k_folds=3, base=GBTConfig(n_rounds=5), seed=4)
    assert a.table == b.table


# ---------------------------------------------------------------------- CSV IO


def test_csv_roundtrips(tmp_path):
    rng = np.random.default_rng(2)
    p1, p2 = rng.dirichlet(np.ones(4), size=5), rng.dirichlet(np.ones(4), size=5)
    stacked = stack_predictions(p1, p2, [0, 1, 2, 3, 0])
    write_stacked_csv(stacked, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == \
        "p1_E,p1_F,p1_V,p1_W,p2_E,p2_F,p2_V,p2_W,truth"
    assert read_stacked_csv(tmp_path / "s.csv") == stacked
    write_argmax_csv(argmax_labels(stacked), tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "pred1,pred2,truth"
    assert read_argmax_csv(tmp_path / "a.csv") == argmax_labels(stacked)
    worked = stack_predictions([WORKED_ROWS[0][0]], [WORKED_ROWS[0][1]], "E")
    write_argmax_csv(argmax_labels(worked), tmp_path / "argmax.csv")
    assert (tmp_path / "argmax.csv").read_text().splitlines()[1] == "Earthquake,Earthquake,E"


def test_csv_header_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(DataError):
        read_stacked_csv(tmp_path / "bad.csv")
    with pytest.raises(DataError):
        read_argmax_csv(tmp_path / "bad.csv")


def test_grid_csv(tmp_path):
    records = lookup_records(lambda a, b: a, reps=2)
    result = grid_search_cv(records, {"max_depth": [1, 2]}, k_folds=2, base=GBTConfig(n_rounds=2))
    write_grid_csv(result.table, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "max_depth,mean_accuracy,std_accuracy"
    assert len(lines) == 3
    with pytest.raises(DataError):
        write_grid_csv([], tmp_path / "e.csv")
