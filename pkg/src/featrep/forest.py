"""Random forest over feature matrices with Gini importance and the significance test."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _cart, numerics
from .errors import DegenerateData, ShapeMismatch


@dataclass
class ForestConfig:
    n_trees: int = 400
    max_features: int | str = "sqrt"
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def resolve_max_features(self, d):
        if self.max_features == "sqrt":
            return max(1, int(math.isqrt(d)))
        if self.max_features in (None, "all"):
            return d
        return max(1, min(d, int(self.max_features)))


@dataclass
class Tree:
    """Flat CART tree. Node ``i`` is a leaf when ``feature[i] == -1``.

    A split sends a row left when ``row[feature] <= threshold``.
    ``counts[i]`` holds the (bootstrap-weighted) class counts reaching node
    ``i`` and ``gain[i]`` the Gini decrease of its split, weighted by the
    fraction of the tree's samples reaching it.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def leaf_class(self):
        return self.counts.argmax(axis=1)

    def apply(self, x):
        return _cart.apply_tree(x, self.feature, self.threshold, self.left, self.right)

    def predict(self, x):
        return self.leaf_class()[self.apply(_as_rows(x))]

    def node(self, i=0):
        """Nested dict view of the subtree rooted at ``i``."""
        if self.feature[i] < 0:
            return {"class_counts": [float(c) for c in self.counts[i]]}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.node(int(self.left[i])),
            "right": self.node(int(self.right[i])),
        }

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["counts"], dtype=np.float64).reshape(len(d["feature"]), -1),
            np.array(d["gain"], dtype=np.float64),
        )


@dataclass
class ForestModel:
    trees: list
    n_features: int
    n_classes: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def save(self, path):
        """JSON: ``{"n_features", "n_classes", "config", "trees": [Tree.to_dict(), ...]}``."""
        doc = {
            "format": "featrep-forest-1",
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "config": vars(self.config),
            "trees": [t.to_dict() for t in self.trees],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(
            trees=[Tree.from_dict(t) for t in doc["trees"]],
            n_features=doc["n_features"],
            n_classes=doc["n_classes"],
            config=ForestConfig(**doc["config"]),
        )


@dataclass
class ImportanceReport:
    scores: np.ndarray
    threshold: float
    significant_mask: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature_index", "score", "significant"])
            for i, (s, m) in enumerate(zip(self.scores, self.significant_mask)):
                w.writerow([i, repr(float(s)), int(m)])


def _as_rows(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def grow_tree(x, y, n_classes, samples=None, max_features=None, min_leaf=1, max_depth=None, seed=0):
    """One CART tree; ``samples`` defaults to every row once."""
    x = np.asfortranarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if samples is None:
        samples = np.arange(len(y))
    d = x.shape[1]
    mf = d if max_features is None else max_features
    out = _cart.grow_tree(x, y, np.asarray(samples, dtype=np.int64), int(n_classes), int(mf),
                          int(min_leaf), -1 if max_depth is None else int(max_depth), int(seed))
    return Tree(*out)


def rf_train(m, cfg=None, n_classes=None):
    """Bagged CART forest on a FeatureMatrix.

    Each tree sees a bootstrap sample of N rows and picks the best Gini split
    among ``max_features`` random candidate features per node.
    """
    cfg = cfg or ForestConfig()
    x, y = m.values, m.labels
    n, d = x.shape
    if n < 2 or d < 1:
        raise ShapeMismatch(f"need N >= 2 and D >= 1, got {x.shape}")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if np.unique(y).size == 1:
        warnings.warn("all training labels are identical; trees are single leaves", DegenerateData)
    xf = np.asfortranarray(x, dtype=np.float64)
    mf = cfg.resolve_max_features(d)
    trees = []
    for t in range(cfg.n_trees):
        rng = numerics.fork_rng(cfg.seed, "forest", t)
        samples = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        tree_seed = int(rng.integers(1, 2**62))
        trees.append(grow_tree(xf, y, n_classes, samples, mf, cfg.min_leaf, cfg.max_depth, tree_seed))
    return ForestModel(trees, d, n_classes, cfg)


def rf_votes(model, rows):
    x = _as_rows(rows)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeMismatch(f"rows of width {x.shape[-1]} for a forest over {model.n_features} features")
    votes = np.zeros((x.shape[0], model.n_classes))
    r = np.arange(x.shape[0])
    for tree in model.trees:
        votes[r, tree.predict(x)] += 1.0
    return votes / max(len(model.trees), 1)


def rf_predict(model, rows):
    """Majority vote; returns (labels, vote fractions). Ties go to the lowest class id."""
    frac = rf_votes(model, rows)
    return frac.argmax(axis=1), frac


def significance_threshold(d):
    """A feature is significant when its importance exceeds one hundredth of the uniform share."""
    return 1.0 / (100.0 * d)


def rf_importance(model, m=None):
    """Gini importance: summed weighted impurity decrease per feature, averaged over trees, normalised.

    ``m`` is only used to check that the matrix width matches the model.
    """
    if m is not None and m.n_features != model.n_features:
        raise ShapeMismatch(f"matrix has {m.n_features} features, model {model.n_features}")
    d = model.n_features
    total = np.zeros(d)
    for tree in model.trees:
        split = tree.feature >= 0
        total += np.bincount(tree.feature[split], weights=tree.gain[split], minlength=d)
    total /= max(len(model.trees), 1)
    s = total.sum()
    scores = total / s if s > 0 else total
    t = significance_threshold(d)
    return ImportanceReport(scores, t, scores > t)


def significant_fraction(report):
    return float(np.count_nonzero(report.significant_mask)) / len(report.scores)
