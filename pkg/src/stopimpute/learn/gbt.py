"""Multiclass gradient-boosted trees with a softmax objective.

Each boosting round fits one regression tree per class on the first and
second derivatives of the cross-entropy. Splits are searched greedily over at
most ``max_bins - 1`` quantile thresholds per feature; leaves take the Newton
step ``-G / (H + l2_lambda)`` scaled by the learning rate. Raw scores start at
the log of the training class priors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._kernels import ensemble_margins, node_histograms

_MIN_HESS = 1e-16
_MIN_GAIN = 1e-12


def softmax(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=1, keepdims=True)
    np.exp(Z, out=Z)
    Z /= Z.sum(axis=1, keepdims=True)
    return Z


def cross_entropy(P: np.ndarray, y_idx: np.ndarray) -> float:
    return float(-np.mean(np.log(np.maximum(P[np.arange(len(y_idx)), y_idx], 1e-300))))


@dataclass
class Tree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray   # go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_nested(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"leaf": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_nested(int(self.left[node])),
            "right": self.to_nested(int(self.right[node])),
        }

    @classmethod
    def from_nested(cls, root: dict) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
                return i
            feature[i] = int(node["feature"])
            threshold[i] = float(node["threshold"])
            left[i] = add(node["left"])
            right[i] = add(node["right"])
            return i

        add(root)
        return cls(np.array(feature, np.int64), np.array(threshold, float),
                   np.array(left, np.int64), np.array(right, np.int64), np.array(value, float))


def quantile_thresholds(X: np.ndarray, max_bins: int) -> List[np.ndarray]:
    """Candidate split points per feature, at most ``max_bins - 1`` of them."""
    out = []
    for f in range(X.shape[1]):
        u = np.unique(X[:, f])
        if len(u) <= max_bins:
            thr = (u[:-1] + u[1:]) / 2.0
        else:
            qs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
            thr = np.unique(np.quantile(X[:, f], qs, method="lower"))
            thr = thr[thr < u[-1]]
        out.append(thr.astype(float))
    return out


def bin_features(X: np.ndarray, thresholds: List[np.ndarray]) -> np.ndarray:
    """Bin index = number of thresholds strictly below the value, so
    ``x <= thr[j]`` exactly when ``bin <= j``."""
    B = np.empty(X.shape, dtype=np.int32)
    for f, thr in enumerate(thresholds):
        B[:, f] = np.searchsorted(thr, X[:, f], side="left")
    return B


def build_tree(binned, thresholds, n_thr, grad, hess, max_depth, l2_lambda, min_child_weight,
               learning_rate) -> Tuple[Tree, np.ndarray]:
    """Grow one tree level by level. Returns the tree and the leaf of each row."""
    n, n_features = binned.shape
    n_bins = int(n_thr.max()) + 1 if len(n_thr) else 1
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    leaf_of = np.zeros(n, dtype=np.int64)
    frontier = [(0, np.arange(n))]
    # split j of feature f is admissible only while j < n_thr[f]
    admissible = np.arange(n_bins)[None, :] < n_thr[:, None]

    def make_leaf(node, rows):
        G = grad[rows].sum()
        H = hess[rows].sum()
        value[node] = -G / (H + l2_lambda) * learning_rate
        leaf_of[rows] = node

    for depth in range(max_depth + 1):
        if not frontier:
            break
        if depth == max_depth:
            for node, rows in frontier:
                make_leaf(node, rows)
            break
        rows_all = np.concatenate([r for _, r in frontier])
        slot = np.concatenate([np.full(len(r), s, dtype=np.int64) for s, (_, r) in enumerate(frontier)])
        Gh, Hh = node_histograms(binned, rows_all, slot, len(frontier), n_bins, grad, hess)
        GL = np.cumsum(Gh, axis=2)
        HL = np.cumsum(Hh, axis=2)
        Gt = GL[:, 0, -1][:, None, None]
        Ht = HL[:, 0, -1][:, None, None]
        GR = Gt - GL
        HR = Ht - HL
        with np.errstate(divide="ignore", invalid="ignore"):  # empty sides when lambda = 0
            gain = GL ** 2 / (HL + l2_lambda) + GR ** 2 / (HR + l2_lambda) - Gt ** 2 / (Ht + l2_lambda)
        ok = admissible[None] & (HL >= min_child_weight) & (HR >= min_child_weight)
        gain = np.where(ok & ~np.isnan(gain), gain, -np.inf)
        next_frontier = []
        for s, (node, rows) in enumerate(frontier):
            flat = int(np.argmax(gain[s]))
            f, j = divmod(flat, n_bins)
            if not gain[s, f, j] > _MIN_GAIN:
                make_leaf(node, rows)
                continue
            go_left = binned[rows, f] <= j
            l_id, r_id = len(feature), len(feature) + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            feature[node] = f
            threshold[node] = float(thresholds[f][j])
            left[node] = l_id
            right[node] = r_id
            next_frontier.append((l_id, rows[go_left]))
            next_frontier.append((r_id, rows[~go_left]))
        frontier = next_frontier

    tree = Tree(np.array(feature, np.int64), np.array(threshold, float), np.array(left, np.int64),
                np.array(right, np.int64), np.array(value, float))
    return tree, leaf_of


def argmax_toward_zero(P: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Column of the row maximum; exact ties go to the class with the smallest
    absolute value (then the smaller value)."""
    order = np.lexsort((classes, np.abs(classes)))
    return order[np.argmax(P[:, order], axis=1)]


class GradientBoostedClassifier(ClassifierMixin, BaseEstimator):
    """Softmax gradient-boosted tree classifier.

    Parameters
    ----------
    n_rounds : int
        Boosting rounds; each adds one tree per class.
    max_depth : int
        Maximum tree depth; 0 gives single-leaf trees.
    learning_rate : float
        Shrinkage applied to every leaf value, in (0, 1].
    l2_lambda : float
        L2 penalty on leaf values.
    min_child_weight : float
        Minimum hessian sum in each child of a split.
    max_bins : int
        Number of histogram bins per feature (thresholds = max_bins - 1).
    random_state : int
        Recorded for provenance; training itself involves no sampling.
    """

    def __init__(self, n_rounds=100, max_depth=6, learning_rate=0.1, l2_lambda=1.0,
                 min_child_weight=1.0, max_bins=256, random_state=0):
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.l2_lambda = l2_lambda
        self.min_child_weight = min_child_weight
        self.max_bins = max_bins
        self.random_state = random_state

    def _check_params(self):
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not 2 <= self.max_bins <= 65536:
            raise ValueError("max_bins must lie in [2, 65536]")

    def fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, y_idx, counts = np.unique(y, return_inverse=True, return_counts=True)
        if len(classes) < 2:
            raise ValueError("training data must contain at least two classes")
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.base_score_ = np.log(counts / counts.sum())
        self.trees_: List[Tuple[int, Tree]] = []
        self.loss_curve_: List[float] = []
        self._flat = None
        self._boost(X, y_idx, self.n_rounds)
        return self

    def _boost(self, X, y_idx, n_rounds):
        if n_rounds <= 0:
            return
        K = len(self.classes_)
        thresholds = quantile_thresholds(X, self.max_bins)
        n_thr = np.array([len(t) for t in thresholds], dtype=np.int64)
        binned = bin_features(X, thresholds)
        F = self._margins(X)
        Y = np.zeros_like(F)
        Y[np.arange(len(y_idx)), y_idx] = 1.0
        for _ in range(n_rounds):
            P = softmax(F)
            grad_all = P - Y
            hess_all = np.maximum(P * (1.0 - P), _MIN_HESS)
            for k in range(K):
                tree, leaf_of = build_tree(
                    binned, thresholds, n_thr, np.ascontiguousarray(grad_all[:, k]),
                    np.ascontiguousarray(hess_all[:, k]), self.max_depth, self.l2_lambda,
                    self.min_child_weight, self.learning_rate)
                F[:, k] += tree.value[leaf_of]
                self.trees_.append((k, tree))
            self.loss_curve_.append(cross_entropy(softmax(F), y_idx))
        self._flat = None

    def boost_more(self, X, y, n_rounds):
        """Append ``n_rounds`` rounds fitted on (X, y) with existing trees frozen.

        Labels not yet in ``classes_`` become new classes whose raw score starts
        at the log of their frequency in ``y`` and gets nothing from old trees.
        """
        check_is_fitted(self, "trees_")
        if n_rounds <= 0:
            return self
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        new = np.setdiff1d(np.unique(y), self.classes_)
        if len(new):
            merged = np.union1d(self.classes_, new)
            remap = np.searchsorted(merged, self.classes_)
            base = np.empty(len(merged))
            base[remap] = self.base_score_
            for c in new:
                base[np.searchsorted(merged, c)] = np.log(np.mean(y == c))
            self.trees_ = [(int(remap[k]), t) for k, t in self.trees_]
            self.classes_ = merged
            self.base_score_ = base
            self._flat = None
        y_idx = np.searchsorted(self.classes_, y)
        self._boost(X, y_idx, n_rounds)
        return self

    def _flatten(self):
        if self._flat is None:
            sizes = [t.n_nodes for _, t in self.trees_]
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else \
                np.zeros(0, np.int64)

            def cat(attr, dtype):
                parts = [getattr(t, attr) for _, t in self.trees_]
                return np.concatenate(parts).astype(dtype) if parts else np.zeros(1, dtype)

            self._flat = (offsets, cat("feature", np.int64), cat("threshold", float),
                          cat("left", np.int64), cat("right", np.int64), cat("value", float),
                          np.array([k for k, _ in self.trees_], dtype=np.int64))
        return self._flat

    def _margins(self, X):
        offsets, feature, threshold, left, right, value, tree_class = self._flatten()
        return ensemble_margins(np.ascontiguousarray(X, dtype=np.float64), offsets, feature, threshold,
                                left, right, value, tree_class, np.asarray(self.base_score_, float),
                                len(self.classes_))

    def decision_function(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._margins(X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        P = self.predict_proba(X)
        return self.classes_[argmax_toward_zero(P, self.classes_)]

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "params": self.get_params(),
            "classes": [int(c) for c in self.classes_],
            "base_score": [float(v) for v in self.base_score_],
            "n_features": int(self.n_features_in_),
            "loss_curve": [float(v) for v in self.loss_curve_],
            "trees": [{"class_index": int(k), "root": t.to_nested()} for k, t in self.trees_],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradientBoostedClassifier":
        est = cls(**d["params"])
        est.classes_ = np.array(d["classes"], dtype=np.int64)
        est.base_score_ = np.array(d["base_score"], dtype=float)
        est.n_features_in_ = int(d["n_features"])
        est.loss_curve_ = list(d.get("loss_curve", []))
        est.trees_ = [(int(t["class_index"]), Tree.from_nested(t["root"])) for t in d["trees"]]
        est._flat = None
        return est
