"""KNN, CART decision tree, random forest and softmax gradient-boosted trees.

All four share one calling convention::

    model = fit(ModelSpec("random_forest", {"n_trees": 50}), train)
    proba = model.predict_proba(X)      # (m, class_count), rows sum to 1

Classes missing from the training set keep a zero column.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from upfwatch.ml import _kernels
from upfwatch.ml.data import Dataset

MODEL_FORMAT = "upfwatch-model"
MODEL_FORMAT_VERSION = 1

KINDS = ("knn", "decision_tree", "random_forest", "gradient_boost")
ALIASES = {
    "knn": "knn",
    "dt": "decision_tree",
    "decision-tree": "decision_tree",
    "decision_tree": "decision_tree",
    "rf": "random_forest",
    "random-forest": "random_forest",
    "random_forest": "random_forest",
    "gb": "gradient_boost",
    "gbt": "gradient_boost",
    "gradient-boost": "gradient_boost",
    "gradient_boost": "gradient_boost",
    "catboost": "gradient_boost",
}
DEFAULTS: dict[str, dict[str, Any]] = {
    "knn": {"k": 5},
    "decision_tree": {"max_depth": 8, "min_leaf": 5},
    "random_forest": {
        "n_trees": 50,
        "max_depth": 14,
        "min_leaf": 1,
        "feature_subsample": "sqrt",
        "bootstrap": True,
    },
    "gradient_boost": {
        "n_rounds": 60,
        "learning_rate": 0.3,
        "max_depth": 3,
        "min_leaf": 1,
        "reg_lambda": 1.0,
        "min_child_weight": 1e-3,
    },
}


class ModelError(ValueError):
    pass


class DimensionMismatch(ModelError):
    pass


class DegenerateData(ModelError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        kind = ALIASES.get(self.kind)
        if kind is None:
            raise ModelError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULTS[kind])
        if unknown:
            raise ModelError(f"unknown {kind} hyperparameters: {sorted(unknown)}")
        merged = {**DEFAULTS[kind], **self.params}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", merged)
        _validate(kind, merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        return cls(doc["kind"], dict(doc.get("params", {})), int(doc.get("seed", 0)))


def _validate(kind: str, p: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ModelError(f"{kind}: {msg}")

    if kind == "knn":
        need(int(p["k"]) >= 1, "k must be >= 1")
        return
    need(p["max_depth"] is None or int(p["max_depth"]) >= 1, "max_depth must be >= 1")
    need(int(p["min_leaf"]) >= 1, "min_leaf must be >= 1")
    if kind == "random_forest":
        need(int(p["n_trees"]) >= 1, "n_trees must be >= 1")
        fs = p["feature_subsample"]
        need(fs == "sqrt" or 0.0 < float(fs) <= 1.0, "feature_subsample must be 'sqrt' or in (0, 1]")
    if kind == "gradient_boost":
        need(int(p["n_rounds"]) >= 1, "n_rounds must be >= 1")
        need(0.0 < float(p["learning_rate"]) <= 1.0, "learning_rate must be in (0, 1]")
        need(float(p["reg_lambda"]) >= 0.0, "reg_lambda must be >= 0")


# ------------------------------------------------------------------ trees


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, width); class frequencies or a single score

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):  # preorder: parents precede children
            if self.left[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _kernels.tree_apply(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        return cls(
            np.asarray(doc["feature"], dtype=np.int64),
            np.asarray(doc["threshold"], dtype=np.float64),
            np.asarray(doc["left"], dtype=np.int64),
            np.asarray(doc["right"], dtype=np.int64),
            np.asarray(doc["value"], dtype=np.float64).reshape(len(doc["feature"]), -1),
        )


def grow_tree(
    X: np.ndarray,
    idx: np.ndarray,
    *,
    find_split: Callable[[np.ndarray, np.ndarray], tuple],
    leaf_value: Callable[[np.ndarray], np.ndarray],
    is_terminal: Callable[[np.ndarray], bool],
    accept: Callable[[np.ndarray, float], bool],
    max_depth: Optional[int],
    min_leaf: int,
    max_features: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tree:
    """Depth-first tree growth; nodes are numbered in preorder.

    ``max_features`` below the feature count draws a fresh sorted feature
    subset per node from ``rng``; otherwise every feature is scanned in index
    order and ``rng`` is never touched.
    """
    d = X.shape[1]
    all_features = np.arange(d, dtype=np.int64)
    depth_cap = math.inf if max_depth is None else max_depth
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[np.ndarray] = []
    stack = [(idx, 0, -1, False)]
    while stack:
        rows, depth, parent, is_right = stack.pop()
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(rows))
        if parent >= 0:
            (right if is_right else left)[parent] = node
        if depth >= depth_cap or rows.size < 2 * min_leaf or is_terminal(rows):
            continue
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False)).astype(np.int64)
        else:
            feats = all_features
        f, thr, score = find_split(rows, feats)
        if f < 0 or not accept(rows, score):
            continue
        go_left = X[rows, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        stack.append((rows[~go_left], depth + 1, node, True))
        stack.append((rows[go_left], depth + 1, node, False))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.vstack(value),
    )


def grow_gini_tree(X, y, idx, n_classes, max_depth, min_leaf, max_features=None, rng=None) -> Tree:
    def leaf_value(rows):
        counts = np.bincount(y[rows], minlength=n_classes).astype(np.float64)
        return counts / counts.sum()

    def is_terminal(rows):
        first = y[rows[0]]
        return bool((y[rows] == first).all())

    def find_split(rows, feats):
        return _kernels.gini_best_split(X, y, rows, feats, n_classes, min_leaf)

    return grow_tree(
        X,
        idx,
        find_split=find_split,
        leaf_value=leaf_value,
        is_terminal=is_terminal,
        accept=lambda rows, score: True,
        max_depth=max_depth,
        min_leaf=min_leaf,
        max_features=max_features,
        rng=rng,
    )


# ----------------------------------------------------------------- models


class TrainedModel:
    kind: str = ""

    def __init__(self, spec: ModelSpec, class_names, n_features: int):
        self.spec = spec
        self.class_names = list(class_names)
        self.n_features = n_features

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def state_dict(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "class_names": self.class_names,
            "n_features": self.n_features,
            "state": self.state_dict(),
        }


class KNNModel(TrainedModel):
    kind = "knn"

    def fit(self, train: Dataset) -> "KNNModel":
        X = train.features
        self.lo = X.min(axis=0)
        span = X.max(axis=0) - self.lo
        self.span = np.where(span > 0, span, 1.0)
        self.train_x = self.scale(X)
        self.train_y = train.labels.copy()
        self.k = min(int(self.spec.params["k"]), X.shape[0])
        return self

    def scale(self, X: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray((X - self.lo) / self.span)

    def neighbors(self, X) -> np.ndarray:
        """Training-row indices of the k nearest points, nearest first, ties by index."""
        return _kernels.knn_neighbors(self.scale(self._check(X)), self.train_x, self.k)

    def predict_proba(self, X) -> np.ndarray:
        votes = self.train_y[self.neighbors(X)]
        counts = np.zeros((votes.shape[0], self.n_classes))
        for c in range(self.n_classes):
            counts[:, c] = (votes == c).sum(axis=1)
        return counts / self.k

    def state_dict(self) -> dict:
        return {
            "lo": self.lo.tolist(),
            "span": self.span.tolist(),
            "train_x": self.train_x.tolist(),
            "train_y": self.train_y.tolist(),
            "k": self.k,
        }

    def load_state(self, s: dict) -> None:
        self.lo = np.asarray(s["lo"], dtype=np.float64)
        self.span = np.asarray(s["span"], dtype=np.float64)
        self.train_x = np.ascontiguousarray(s["train_x"], dtype=np.float64).reshape(-1, self.n_features)
        self.train_y = np.asarray(s["train_y"], dtype=np.int64)
        self.k = int(s["k"])


class DecisionTreeModel(TrainedModel):
    kind = "decision_tree"

    def fit(self, train: Dataset) -> "DecisionTreeModel":
        p = self.spec.params
        idx = np.arange(train.n, dtype=np.int64)
        self.tree = grow_gini_tree(
            train.features, train.labels, idx, self.n_classes, p["max_depth"], int(p["min_leaf"])
        )
        return self

    def predict_proba(self, X) -> np.ndarray:
        return self.tree.predict(self._check(X))

    def state_dict(self) -> dict:
        return {"tree": self.tree.to_dict()}

    def load_state(self, s: dict) -> None:
        self.tree = Tree.from_dict(s["tree"])


class RandomForestModel(TrainedModel):
    kind = "random_forest"

    def max_features(self) -> int:
        fs = self.spec.params["feature_subsample"]
        d = self.n_features
        if fs == "sqrt":
            return max(1, int(math.sqrt(d)))
        return max(1, min(d, int(round(float(fs) * d))))

    def fit(self, train: Dataset) -> "RandomForestModel":
        p = self.spec.params
        n = train.n
        m = self.max_features()
        self.trees = []
        for child in np.random.SeedSequence(self.spec.seed).spawn(int(p["n_trees"])):
            rng = np.random.default_rng(child)
            if p["bootstrap"]:
                idx = np.sort(rng.integers(0, n, size=n)).astype(np.int64)
            else:
                idx = np.arange(n, dtype=np.int64)
            self.trees.append(
                grow_gini_tree(
                    train.features, train.labels, idx, self.n_classes,
                    p["max_depth"], int(p["min_leaf"]), max_features=m, rng=rng,
                )
            )
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        acc = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def state_dict(self) -> dict:
        return {"trees": [t.to_dict() for t in self.trees]}

    def load_state(self, s: dict) -> None:
        self.trees = [Tree.from_dict(t) for t in s["trees"]]


def _softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class GradientBoostModel(TrainedModel):
    """Additive regression trees on the multinomial log-loss, Newton leaf steps."""

    kind = "gradient_boost"

    def fit(self, train: Dataset) -> "GradientBoostModel":
        p = self.spec.params
        X, y = train.features, train.labels
        n = train.n
        counts = np.bincount(y, minlength=self.n_classes)
        self.present = np.flatnonzero(counts > 0)
        K = self.present.size
        self.base = np.log(counts[self.present] / n)
        self.rounds: list[list[Tree]] = []
        self.train_loss: list[float] = []
        if K < 2:
            return self
        lr = float(p["learning_rate"])
        lam = float(p["reg_lambda"])
        min_leaf = int(p["min_leaf"])
        min_hess = float(p["min_child_weight"])
        Y = (y[:, None] == self.present[None, :]).astype(np.float64)
        F = np.tile(self.base, (n, 1))
        idx = np.arange(n, dtype=np.int64)
        self.train_loss.append(_nll(F, Y))
        for _ in range(int(p["n_rounds"])):
            P = _softmax(F)
            trees = []
            for k in range(K):
                g = np.ascontiguousarray(P[:, k] - Y[:, k])
                h = np.ascontiguousarray(np.maximum(P[:, k] * (1.0 - P[:, k]), 1e-16))
                tree = _grow_newton_tree(X, g, h, idx, p["max_depth"], min_leaf, min_hess, lam, lr)
                F[:, k] += tree.value[tree.apply(X), 0]
                trees.append(tree)
            self.rounds.append(trees)
            self.train_loss.append(_nll(F, Y))
        return self

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        F = np.tile(self.base, (X.shape[0], 1))
        for trees in self.rounds:
            for k, tree in enumerate(trees):
                F[:, k] += tree.value[tree.apply(X), 0]
        return F

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.zeros((X.shape[0], self.n_classes))
        if self.present.size == 1:
            out[:, self.present[0]] = 1.0
        else:
            out[:, self.present] = _softmax(self.decision_function(X))
        return out

    def state_dict(self) -> dict:
        return {
            "present": self.present.tolist(),
            "base": self.base.tolist(),
            "rounds": [[t.to_dict() for t in trees] for trees in self.rounds],
            "train_loss": self.train_loss,
        }

    def load_state(self, s: dict) -> None:
        self.present = np.asarray(s["present"], dtype=np.int64)
        self.base = np.asarray(s["base"], dtype=np.float64)
        self.rounds = [[Tree.from_dict(t) for t in trees] for trees in s["rounds"]]
        self.train_loss = list(s.get("train_loss", []))


def _nll(F: np.ndarray, Y: np.ndarray) -> float:
    z = F - F.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(Y * logp).sum() / F.shape[0])


def _grow_newton_tree(X, g, h, idx, max_depth, min_leaf, min_hess, lam, lr) -> Tree:
    def leaf_value(rows):
        return np.array([-lr * g[rows].sum() / (h[rows].sum() + lam)])

    def accept(rows, score):
        parent = g[rows].sum() ** 2 / (h[rows].sum() + lam)
        return score - parent > 0.0

    def find_split(rows, feats):
        return _kernels.newton_best_split(X, g, h, rows, feats, min_leaf, min_hess, lam)

    return grow_tree(
        X,
        idx,
        find_split=find_split,
        leaf_value=leaf_value,
        is_terminal=lambda rows: False,
        accept=accept,
        max_depth=max_depth,
        min_leaf=min_leaf,
    )


_CLASSES = {
    "knn": KNNModel,
    "decision_tree": DecisionTreeModel,
    "random_forest": RandomForestModel,
    "gradient_boost": GradientBoostModel,
}


def fit(spec: ModelSpec, train: Dataset) -> TrainedModel:
    if train.n == 0:
        raise DegenerateData("cannot fit on an empty dataset")
    model = _CLASSES[spec.kind](spec, train.class_names, train.d)
    return model.fit(train)


def predict_proba(model: TrainedModel, features) -> np.ndarray:
    return model.predict_proba(features)


def model_from_dict(doc: dict) -> TrainedModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError("not a upfwatch model document")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model format_version {doc.get('format_version')!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    model = _CLASSES[spec.kind](spec, doc["class_names"], int(doc["n_features"]))
    model.load_state(doc["state"])
    return model


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text()))
