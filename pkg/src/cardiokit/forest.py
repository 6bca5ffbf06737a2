"""Bagged CART random forest.

Each tree trains on a bootstrap sample (with replacement, original size)
and greedily minimizes Gini impurity over a random feature subset at every
split, with thresholds at midpoints between consecutive distinct sorted
values.  Leaves store class counts; a tree votes its leaf's majority class
and the forest's probability for a class is the fraction of trees voting
for it.  Construction is deterministic given rng_seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SingleClassDataset(Exception):
    pass


class NonFiniteFeature(Exception):
    pass


class UntrainedModel(Exception):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_split: int = 2
    features_per_split: int = 5  # ceil(sqrt(20)) for the canonical feature set
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1 or None, got {self.max_depth}")
        if self.min_split < 2:
            raise ValueError(f"min_split must be >= 2, got {self.min_split}")
        if self.features_per_split < 1:
            raise ValueError(f"features_per_split must be >= 1, got {self.features_per_split}")


@dataclass(frozen=True)
class Tree:
    """Flat array encoding: node i is a leaf iff feature[i] < 0; otherwise
    samples with x[feature[i]] <= threshold[i] descend to left[i], the rest
    to right[i].  counts[i] holds the node's training class counts."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def leaf_for(self, x: np.ndarray) -> int:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return i

    def vote(self, x: np.ndarray) -> int:
        # leaf majority; ties resolve to the lowest class index
        return int(np.argmax(self.counts[self.leaf_for(x)]))


@dataclass(frozen=True)
class Forest:
    trees: tuple[Tree, ...] = ()
    n_classes: int = 0
    n_features: int = 0
    params: ForestParams = field(default_factory=ForestParams)


def _best_split(X: np.ndarray, y: np.ndarray, feat_ids: np.ndarray,
                n_classes: int) -> tuple[int, float] | None:
    """Lowest weighted child Gini over the candidate features; ties keep the
    earliest candidate feature and the lowest threshold."""
    n = len(y)
    base = np.bincount(y, minlength=n_classes).astype(np.float64)
    best_score = np.inf
    best = None
    for f in feat_ids:
        v = X[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        boundaries = np.flatnonzero(vs[:-1] != vs[1:])
        if boundaries.size == 0:
            continue
        onehot = np.zeros((n, n_classes), dtype=np.float64)
        onehot[np.arange(n), y[order]] = 1.0
        cum = np.cumsum(onehot, axis=0)
        cl = cum[boundaries]
        nl = (boundaries + 1).astype(np.float64)
        cr = base - cl
        nr = n - nl
        gini_l = 1.0 - ((cl / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((cr / nr[:, None]) ** 2).sum(axis=1)
        score = (nl * gini_l + nr * gini_r) / n
        j = int(np.argmin(score))
        if score[j] < best_score:
            best_score = score[j]
            thr = (vs[boundaries[j]] + vs[boundaries[j] + 1]) / 2.0
            best = (int(f), float(thr))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, p: ForestParams, n_classes: int,
               rng: np.random.Generator) -> Tree:
    d = X.shape[1]
    k = min(p.features_per_split, d)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx: np.ndarray) -> int:
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return i

    # explicit stack: children are numbered and grown in discovery order,
    # which pins the rng draw sequence
    root_idx = np.arange(len(y))
    stack = [(new_node(root_idx), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        labels = y[idx]
        if (len(idx) < p.min_split
                or (p.max_depth is not None and depth >= p.max_depth)
                or np.all(labels == labels[0])):
            continue
        feats = rng.choice(d, size=k, replace=False)
        split = _best_split(X[idx], labels, feats, n_classes)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        if not mask.any() or mask.all():
            continue
        feature[node] = f
        threshold[node] = thr
        li = new_node(idx[mask])
        ri = new_node(idx[~mask])
        left[node] = li
        right[node] = ri
        stack.append((ri, idx[~mask], depth + 1))
        stack.append((li, idx[mask], depth + 1))
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.int64),
    )


def train_forest(X, y, params: ForestParams = ForestParams(),
                 n_classes: int | None = None) -> Forest:
    """Fit a forest on (n, d) features and integer class labels."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"need (n, d) features and n labels, got {X.shape} and {y.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("feature matrix contains NaN or infinity")
    if np.unique(y).size < 2:
        raise SingleClassDataset("training labels contain fewer than 2 classes")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    seeds = np.random.SeedSequence(params.rng_seed).spawn(params.n_trees)
    trees = []
    n = len(y)
    for seq in seeds:
        rng = np.random.default_rng(seq)
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X[boot], y[boot], params, n_classes, rng))
    return Forest(trees=tuple(trees), n_classes=n_classes, n_features=X.shape[1],
                  params=params)


def forest_predict(forest: Forest, x) -> tuple[int, np.ndarray]:
    """(argmax class index, per-class vote fractions); argmax ties resolve
    to the lowest class index."""
    if not isinstance(forest, Forest) or len(forest.trees) == 0:
        raise UntrainedModel("forest has no trained trees")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (forest.n_features,):
        raise ValueError(f"expected {forest.n_features} features, got shape {x.shape}")
    votes = np.zeros(forest.n_classes, dtype=np.int64)
    for tree in forest.trees:
        votes[tree.vote(x)] += 1
    probs = votes / len(forest.trees)
    return int(np.argmax(probs)), probs
