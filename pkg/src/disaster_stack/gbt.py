"""Multiclass gradient-boosted regression trees with a softmax objective.

Each round computes softmax probabilities from the current scores, then for
every class fits one depth-limited regression tree to the first- and
second-order statistics ``g = p - y`` and ``h = p (1 - p)``. Splits are
chosen by the second-order gain

    0.5 * (GL^2 / (HL + lambda) + GR^2 / (HR + lambda) - G^2 / (H + lambda))

and leaves store ``-G / (H + lambda)`` scaled by the learning rate.

Feature values are bucketed once per fit: every midpoint between
consecutive distinct training values is a candidate threshold (capped at
``MAX_THRESHOLDS`` by quantiles), and a row goes left when
``x < threshold``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CheckpointError, DataError

MAX_THRESHOLDS = 255
MIN_GAIN = 1e-12
MAGIC = b"GBTM"
VERSION = 1


@dataclass(frozen=True)
class GBTConfig:
    max_depth: int = 4
    learning_rate: float = 0.01
    min_child_weight: float = 1.0
    subsample: float = 1.0
    n_rounds: int = 100
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.n_rounds < 0:
            raise ValueError(f"n_rounds must be >= 0, got {self.n_rounds}")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError(f"subsample must lie in (0, 1], got {self.subsample}")
        if self.min_child_weight < 0 or self.reg_lambda < 0:
            raise ValueError("min_child_weight and reg_lambda must be non-negative")


@dataclass
class Tree:
    """Preorder node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return self.value[node]
            r = rows[active]
            n = node[active]
            go_left = X[r, feat[active]] < self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])


@dataclass
class GBTModel:
    trees: list = field(default_factory=list)  # trees[round][class]
    base_score: np.ndarray = field(default_factory=lambda: np.zeros(4))
    config: GBTConfig = field(default_factory=GBTConfig)
    n_features: int = 2

    @property
    def n_classes(self) -> int:
        return int(self.base_score.shape[0])

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        scores = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += tree.predict(X)
        return scores

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def candidate_thresholds(column: np.ndarray) -> np.ndarray:
    values = np.unique(column)
    mids = (values[:-1] + values[1:]) / 2.0
    if mids.shape[0] > MAX_THRESHOLDS:
        mids = np.unique(np.quantile(mids, np.linspace(0, 1, MAX_THRESHOLDS)))
    return mids


class _TreeBuilder:
    def __init__(self, bins, thresholds, config: GBTConfig):
        self.bins = bins  # (U, F) int per distinct row: number of thresholds <= x
        self.thresholds = thresholds
        self.cfg = config
        self.nodes = []  # [feature, threshold, left, right, value]

    def leaf_value(self, G, H):
        return -G / (H + self.cfg.reg_lambda) * self.cfg.learning_rate

    def best_split(self, rows, g, h, G, H):
        lam, mcw = self.cfg.reg_lambda, self.cfg.min_child_weight
        parent = G * G / (H + lam)
        best = (MIN_GAIN, None, None)
        for f, cuts in enumerate(self.thresholds):
            nb = cuts.shape[0]
            if nb == 0:
                continue
            b = self.bins[rows, f]
            GL = np.cumsum(np.bincount(b, weights=g, minlength=nb + 1))[:nb]
            HL = np.cumsum(np.bincount(b, weights=h, minlength=nb + 1))[:nb]
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
            gain[(HL < mcw) | (HR < mcw)] = -np.inf
            j = int(np.argmax(gain))
            if gain[j] > best[0]:
                best = (gain[j], f, j)
        return best

    def grow(self, rows, g, h, depth):
        G, H = float(g.sum()), float(h.sum())
        index = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, self.leaf_value(G, H)])
        if depth >= self.cfg.max_depth or rows.shape[0] < 2:  # rows are distinct
            return index
        _, f, j = self.best_split(rows, g, h, G, H)
        if f is None:
            return index
        go_left = self.bins[rows, f] <= j
        node = self.nodes[index]
        node[0], node[1], node[4] = f, float(self.thresholds[f][j]), 0.0
        node[2] = self.grow(rows[go_left], g[go_left], h[go_left], depth + 1)
        node[3] = self.grow(rows[~go_left], g[~go_left], h[~go_left], depth + 1)
        return index

    def build(self, rows, g, h) -> Tree:
        self.nodes = []
        self.grow(rows, g[rows], h[rows], 0)
        arr = list(zip(*self.nodes))
        return Tree(
            feature=np.asarray(arr[0], dtype=np.intp),
            threshold=np.asarray(arr[1], dtype=np.float64),
            left=np.asarray(arr[2], dtype=np.intp),
            right=np.asarray(arr[3], dtype=np.intp),
            value=np.asarray(arr[4], dtype=np.float64),
        )


def fit_gbt(X, y, config: GBTConfig, n_classes: int = 4) -> GBTModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("gradient boosting needs a non-empty (N, F) feature matrix")
    if y.shape != (X.shape[0],):
        raise DataError(f"{y.shape[0]} targets for {X.shape[0]} rows")
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"targets must lie in [0, {n_classes})")
    n = X.shape[0]
    # Rows with identical features are indistinguishable to every split, so
    # trees are grown over distinct rows carrying summed g and h.
    distinct, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    thresholds = [candidate_thresholds(distinct[:, f]) for f in range(X.shape[1])]
    bins = np.stack(
        [np.searchsorted(t, distinct[:, f], side="right") for f, t in enumerate(thresholds)],
        axis=1,
    )
    u = distinct.shape[0]
    onehot = np.eye(n_classes)[y]
    model = GBTModel([], np.zeros(n_classes), config, X.shape[1])
    scores = np.zeros((n, n_classes))
    builder = _TreeBuilder(bins, thresholds, config)
    n_sample = math.ceil(config.subsample * n)
    for r in range(config.n_rounds):
        p = softmax_rows(scores)
        if n_sample < n:
            rng = np.random.default_rng([config.seed, r])
            rows = np.sort(rng.choice(n, size=n_sample, replace=False))
        else:
            rows = np.arange(n)
        groups = inverse[rows]
        present = np.flatnonzero(np.bincount(groups, minlength=u))
        round_trees = []
        for k in range(n_classes):
            pk = p[rows, k]
            g = np.bincount(groups, weights=pk - onehot[rows, k], minlength=u)
            h = np.bincount(groups, weights=pk * (1.0 - pk), minlength=u)
            tree = builder.build(present, g, h)
            scores[:, k] += tree.predict(distinct)[inverse]
            round_trees.append(tree)
        model.trees.append(round_trees)
    return model


# ------------------------------------------------------------------ file IO


def encode_gbt(model: GBTModel, extra: dict | None = None) -> bytes:
    header = json.dumps({"config": asdict(model.config), **(extra or {})}, sort_keys=True)
    raw = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(raw)), raw]
    parts.append(struct.pack("<BH", model.n_classes, model.n_features))
    parts.append(struct.pack(f"<{model.n_classes}d", *model.base_score))
    parts.append(struct.pack("<I", len(model.trees)))
    for round_trees in model.trees:
        for tree in round_trees:
            parts.append(struct.pack("<I", tree.n_nodes))
            for i in range(tree.n_nodes):
                if tree.feature[i] < 0:
                    parts.append(struct.pack("<Bd", 0, tree.value[i]))
                else:
                    parts.append(struct.pack("<BHd", 1, tree.feature[i], tree.threshold[i]))
    return b"".join(parts)


def decode_gbt(blob: bytes):
    """Return ``(model, header)`` from :func:`encode_gbt` output."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a GBT model file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        st = struct.Struct("<" + fmt)
        if pos + st.size > len(blob):
            raise CheckpointError("corrupt GBT model file: truncated")
        out = st.unpack_from(blob, pos)
        pos += st.size
        return out

    version, hlen = take("HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if pos + hlen > len(blob):
        raise CheckpointError("corrupt GBT model file: truncated")
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    n_classes, n_features = take("BH")
    base = np.asarray(take(f"{n_classes}d"), dtype=np.float64)
    (n_rounds,) = take("I")
    trees = []
    for _ in range(n_rounds):
        round_trees = []
        for _ in range(n_classes):
            (n_nodes,) = take("I")
            nodes = []

            def read_node():
                index = len(nodes)
                (kind,) = take("B")
                if kind == 0:
                    (value,) = take("d")
                    nodes.append([-1, 0.0, -1, -1, value])
                else:
                    feat, thr = take("Hd")
                    nodes.append([feat, thr, -1, -1, 0.0])
                    nodes[index][2] = read_node()
                    nodes[index][3] = read_node()
                return index

            read_node()
            if len(nodes) != n_nodes:
                raise CheckpointError("corrupt GBT model file: node count mismatch")
            arr = list(zip(*nodes))
            round_trees.append(Tree(
                np.asarray(arr[0], dtype=np.intp), np.asarray(arr[1], dtype=np.float64),
                np.asarray(arr[2], dtype=np.intp), np.asarray(arr[3], dtype=np.intp),
                np.asarray(arr[4], dtype=np.float64),
            ))
        trees.append(round_trees)
    if pos != len(blob):
        raise CheckpointError("corrupt GBT model file: trailing bytes")
    config = GBTConfig(**header["config"])
    return GBTModel(trees, base, config, n_features), header


def save_gbt(model: GBTModel, path, extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(encode_gbt(model, extra))


def load_gbt(path):
    with open(path, "rb") as fh:
        return decode_gbt(fh.read())
