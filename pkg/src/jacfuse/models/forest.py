"""CART decision trees with Gini impurity and a bootstrap random forest."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch, SingleClass

N_CLASSES = 4
LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    max_features: int | None = None  # None -> floor(sqrt(d))
    bootstrap: bool = True
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be positive")


@dataclass
class Tree:
    """Flat node arrays. ``feature == -1`` marks a leaf; ``value`` holds class distributions."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    config: ForestConfig = field(default_factory=ForestConfig)


def gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity 1 - sum p^2 along the last axis (0 for empty rows)."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum(axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return 1.0 - ((counts / safe[..., None]) ** 2).sum(axis=-1)


def best_split(x: np.ndarray, y: np.ndarray, features, min_leaf: int = 1):
    """Best (feature, threshold, score) over ``features`` in the given order.

    Score is the size-weighted child impurity n_l*G_l + n_r*G_r. Thresholds are
    midpoints between consecutive distinct sorted values. Ties keep the
    earlier feature, then the lower threshold. Returns None if nothing splits.
    """
    n = len(y)
    best = None
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        onehot = np.zeros((n, N_CLASSES))
        onehot[np.arange(n), y[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[:-1]
        right = left[-1] + onehot[-1] - left if n > 1 else left
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        score = n_left * gini(left) + (n - n_left) * gini(right)
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if best is None or score[i] < best[2]:
            best = (int(f), 0.5 * (xs[i] + xs[i + 1]), float(score[i]))
    return best


def build_tree(x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    """Grow one CART tree depth-first.

    At each node ``max_features`` features are tried in a random order; if none
    of them separates the node the remaining features are tried before the
    node becomes a leaf.
    """
    d = x.shape[1]
    k = cfg.max_features or max(1, int(np.floor(np.sqrt(d))))
    k = min(k, d)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        counts = np.bincount(y[idx], minlength=N_CLASSES).astype(np.float64)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts / counts.sum())
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(np.unique(y[idx])) < 2 or (cfg.max_depth is not None and depth >= cfg.max_depth):
            continue
        # with every feature eligible, natural order makes ties go to the lowest index
        perm = np.arange(d) if k >= d else rng.permutation(d)
        split = best_split(x[idx], y[idx], perm[:k], cfg.min_samples_leaf)
        if split is None and k < d:
            split = best_split(x[idx], y[idx], perm[k:], cfg.min_samples_leaf)
        if split is None:
            continue
        f, t, _ = split
        mask = x[idx, f] <= t
        feature[node], threshold[node] = f, t
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64).reshape(-1, N_CLASSES),
    )


def _train_one(args):
    x, y, cfg, t = args
    rng = np.random.default_rng(cfg.seed + t)
    if cfg.bootstrap:
        idx = rng.integers(0, len(y), len(y))
        return build_tree(x[idx], y[idx], cfg, rng)
    return build_tree(x, y, cfg, rng)


def rf_train(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig = ForestConfig(), jobs: int = 1) -> ForestModel:
    """Train a forest; tree ``t`` uses seed ``cfg.seed + t`` so results do not depend on ``jobs``."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch(f"features {x.shape} do not match {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise SingleClass("random forest needs at least two classes")
    tasks = [(x, y, cfg, t) for t in range(cfg.n_trees)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            trees = list(ex.map(_train_one, tasks))
    else:
        trees = [_train_one(task) for task in tasks]
    return ForestModel(trees, x.shape[1], cfg)


def rf_predict_proba(model: ForestModel, features: np.ndarray, n_trees: int | None = None) -> np.ndarray:
    """Mean of per-tree leaf distributions; ``n_trees`` limits to the first trees."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise DimensionMismatch(f"expected {model.n_features} features, got {x.shape[1]}")
    trees = model.trees[: n_trees or len(model.trees)]
    total = np.zeros((len(x), N_CLASSES))
    for tree in trees:
        total += tree.predict_proba(x)
    return total / len(trees)


def rf_tree_curve(model: ForestModel, features: np.ndarray, labels: np.ndarray) -> list[dict]:
    """Accuracy of the first t trees for t = 1..n_trees (trees play the role of epochs)."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    total = np.zeros((len(x), N_CLASSES))
    rows = []
    for t, tree in enumerate(model.trees, start=1):
        total += tree.predict_proba(x)
        p = total / t
        picked = np.maximum(p[np.arange(len(y)), y], 1e-12)
        rows.append({"epoch": t, "loss": float(-np.log(picked).mean()), "accuracy": float(np.mean(p.argmax(axis=1) == y))})
    return rows
