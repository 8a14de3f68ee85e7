"""Stacking: base-model probabilities -> argmax labels -> meta-model.

Two meta-models are available over the stacked rows: gradient-boosted trees
(tuned by grid-searched stratified k-fold CV) and a multiclass logistic
regression baseline on one-hot features.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .gbt import GBTConfig, GBTModel, fit_gbt, softmax_rows
from .labels import NUM_CLASSES, ClassLabel

PROB_TOLERANCE = 1e-5
STACKED_HEADER = [f"p{m}_{c.symbol}" for m in (1, 2) for c in ClassLabel] + ["truth"]
ARGMAX_HEADER = ["pred1", "pred2", "truth"]

DEFAULT_GRID = {
    "max_depth": [2, 4, 6],
    "learning_rate": [0.01, 0.1, 0.3],
    "min_child_weight": [1, 5],
    "subsample": [0.8, 1.0],
}


@dataclass(frozen=True)
class StackedRecord:
    p1: tuple
    p2: tuple
    truth: ClassLabel


@dataclass(frozen=True)
class ArgmaxRecord:
    pred1: ClassLabel
    pred2: ClassLabel
    truth: ClassLabel


def _check_rows(probs: np.ndarray, which: str):
    if probs.ndim != 2 or probs.shape[1] != NUM_CLASSES:
        raise DataError(f"{which} probabilities must be (N, {NUM_CLASSES}), got {probs.shape}")
    if (probs < 0).any():
        raise DataError(f"{which} has negative probabilities")
    sums = probs.astype(np.float64).sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOLERANCE)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{which} row {i} sums to {sums[i]!r}, not 1")


def stack_predictions(p1, p2, truths) -> list[StackedRecord]:
    """Column-wise stack of two probability matrices with the true labels."""
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    truths = list(truths)
    if len(truths) == 0:
        return []
    _check_rows(p1, "model 1")
    _check_rows(p2, "model 2")
    if not p1.shape[0] == p2.shape[0] == len(truths):
        raise DataError(f"row counts differ: {p1.shape[0]}, {p2.shape[0]}, {len(truths)}")
    return [
        StackedRecord(tuple(float(v) for v in a), tuple(float(v) for v in b), ClassLabel.parse(t))
        for a, b, t in zip(p1, p2, truths)
    ]


def build_stacked_dataset(model1, model2, eval_split) -> list[StackedRecord]:
    """Predict ``eval_split`` (images, labels) with both models and stack the rows."""
    if len(eval_split) == 0:
        return []
    p1 = model1.predict_proba(eval_split.images)
    p2 = model2.predict_proba(eval_split.images)
    return stack_predictions(p1, p2, [int(v) for v in eval_split.labels])


def argmax_labels(stacked) -> list[ArgmaxRecord]:
    """Highest-probability class of each vector; ties go to the lowest code."""
    return [
        ArgmaxRecord(ClassLabel(int(np.argmax(r.p1))), ClassLabel(int(np.argmax(r.p2))), r.truth)
        for r in stacked
    ]


def features(records, mode="argmax"):
    """``(X, y)`` arrays from stacked or argmax records.

    ``argmax``: two integer class codes. ``proba``: the eight raw
    probabilities (stacked records only). ``onehot``: 2x4 indicators of the
    argmax codes.
    """
    records = list(records)
    y = np.array([int(r.truth) for r in records], dtype=np.int64)
    if mode == "proba":
        if records and not isinstance(records[0], StackedRecord):
            raise DataError("probability features need stacked records")
        X = np.array([r.p1 + r.p2 for r in records], dtype=np.float64).reshape(-1, 8)
        return X, y
    if records and isinstance(records[0], StackedRecord):
        records = argmax_labels(records)
    codes = np.array([(int(r.pred1), int(r.pred2)) for r in records], dtype=np.int64).reshape(-1, 2)
    if mode == "argmax":
        return codes.astype(np.float64), y
    if mode == "onehot":
        X = np.zeros((codes.shape[0], 2 * NUM_CLASSES))
        rows = np.arange(codes.shape[0])
        X[rows, codes[:, 0]] = 1.0
        X[rows, NUM_CLASSES + codes[:, 1]] = 1.0
        return X, y
    raise ValueError(f"unknown feature mode {mode!r}")


# ------------------------------------------------------------- meta-models


def train_gbt(records, config: GBTConfig, mode="argmax") -> GBTModel:
    X, y = features(records, mode)
    if X.shape[0] == 0:
        raise DataError("cannot train a meta-model on an empty dataset")
    return fit_gbt(X, y, config, NUM_CLASSES)


def gbt_predict(model: GBTModel, pred1, pred2):
    """``(probabilities, label)`` for one pair of base-model predictions."""
    x = np.array([[int(ClassLabel.parse(pred1)), int(ClassLabel.parse(pred2))]], dtype=np.float64)
    probs = model.predict_proba(x)[0]
    return probs, ClassLabel(int(np.argmax(probs)))


@dataclass
class LogRegModel:
    weights: np.ndarray  # (8, 4)
    bias: np.ndarray  # (4,)
    loss_trace: list = field(default_factory=list)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(np.asarray(X, dtype=np.float64) @ self.weights + self.bias)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def train_logreg_baseline(records, lr=0.5, iterations=500, seed=0) -> LogRegModel:
    """Softmax regression on one-hot argmax features, full-batch gradient descent.

    Weights start at zero, so ``seed`` only matters for API symmetry.
    """
    X, y = features(records, "onehot")
    if X.shape[0] == 0:
        raise DataError("cannot train a meta-model on an empty dataset")
    n = X.shape[0]
    Y = np.eye(NUM_CLASSES)[y]
    model = LogRegModel(np.zeros((X.shape[1], NUM_CLASSES)), np.zeros(NUM_CLASSES))
    for _ in range(iterations):
        P = model.predict_proba(X)
        model.loss_trace.append(float(-np.mean(np.log(np.maximum(P[np.arange(n), y], 1e-300)))))
        diff = (P - Y) / n
        model.weights -= lr * (X.T @ diff)
        model.bias -= lr * diff.sum(axis=0)
    return model


# ------------------------------------------------------------- grid search


class GridSearchResult(NamedTuple):
    best_config: GBTConfig
    table: list  # dicts: grid fields + fold accuracies, mean, std
    model: GBTModel


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per row: each class shuffled by seed, then dealt round-robin."""
    fold = np.empty(y.shape[0], dtype=np.int64)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[np.random.default_rng([seed, int(c)]).permutation(idx.shape[0])]
        fold[idx] = np.arange(idx.shape[0]) % k
    return fold


def stratified_row_split(y, train_fraction=0.8, seed=0):
    """``(train_rows, test_rows)``: per class, a seeded shuffle then round(f * n) to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    y = np.asarray(y)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[np.random.default_rng([seed, int(c)]).permutation(idx.shape[0])]
        cut = int(np.floor(train_fraction * idx.shape[0] + 0.5))
        train.extend(idx[:cut].tolist())
        test.extend(idx[cut:].tolist())
    return sorted(train), sorted(test)


def cell_seed(seed: int, config_index: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([seed, config_index, fold_index]).generate_state(1)[0])


def grid_configs(grid: dict, base: GBTConfig):
    order = [f.name for f in fields(GBTConfig) if f.name in grid]
    unknown = set(grid) - set(order)
    if unknown:
        raise ValueError(f"unknown grid fields: {sorted(unknown)}")
    if not order or any(len(grid[name]) == 0 for name in order):
        raise ValueError("grid must name at least one field with at least one candidate")
    for values in itertools.product(*(grid[name] for name in order)):
        yield dict(zip(order, values)), replace(base, **dict(zip(order, values)))


def grid_search_cv(records, grid=None, k_folds=5, base=GBTConfig(), seed=0, mode="argmax"):
    """Exhaustive grid over GBTConfig fields scored by mean stratified k-fold accuracy.

    The best configuration (first in enumeration order among equal means) is
    refit on all records.
    """
    grid = DEFAULT_GRID if grid is None else grid
    X, y = features(records, mode)
    if k_folds < 2:
        raise ValueError(f"k_folds must be >= 2, got {k_folds}")
    if X.shape[0] < k_folds:
        raise DataError(f"{X.shape[0]} records cannot fill {k_folds} folds")
    folds = stratified_folds(y, k_folds, seed)
    table = []
    best_mean, best_config = -np.inf, None
    for ci, (values, config) in enumerate(grid_configs(grid, base)):
        accs = []
        for fi in range(k_folds):
            train, test = folds != fi, folds == fi
            cfg = replace(config, seed=cell_seed(seed, ci, fi))
            model = fit_gbt(X[train], y[train], cfg, NUM_CLASSES)
            accs.append(float(np.mean(model.predict(X[test]) == y[test])))
        mean = float(np.mean(accs))
        table.append({**values, "fold_accuracies": accs, "mean_accuracy": mean,
                      "std_accuracy": float(np.std(accs))})
        if mean > best_mean:
            best_mean, best_config = mean, config
    final = fit_gbt(X, y, replace(best_config, seed=seed), NUM_CLASSES)
    return GridSearchResult(replace(best_config, seed=seed), table, final)


# -------------------------------------------------------------------- CSV IO


def _fmt(v: float) -> str:
    return repr(float(v))


def write_stacked_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STACKED_HEADER)
        for r in records:
            w.writerow([_fmt(v) for v in r.p1 + r.p2] + [r.truth.symbol])


def read_stacked_csv(path) -> list[StackedRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != STACKED_HEADER:
        raise DataError(f"{path} does not start with the stacked header")
    return [
        StackedRecord(tuple(float(v) for v in row[:4]), tuple(float(v) for v in row[4:8]),
                      ClassLabel.parse(row[8]))
        for row in rows[1:]
    ]


def write_argmax_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ARGMAX_HEADER)
        for r in records:
            w.writerow([r.pred1.title, r.pred2.title, r.truth.symbol])


def read_argmax_csv(path) -> list[ArgmaxRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ARGMAX_HEADER:
        raise DataError(f"{path} does not start with the argmax header")
    return [ArgmaxRecord(*(ClassLabel.parse(v) for v in row)) for row in rows[1:]]


def write_grid_csv(table, path):
    if not table:
        raise DataError("empty grid-search table")
    keys = [k for k in table[0] if k not in ("fold_accuracies", "mean_accuracy", "std_accuracy")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + ["mean_accuracy", "std_accuracy"])
        for row in table:
            w.writerow([row[k] for k in keys] + [_fmt(row["mean_accuracy"]),
                                                 _fmt(row["std_accuracy"])])
