"""Multinomial logistic regression trained by mini-batch gradient descent."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .gbt import argmax_toward_zero, softmax


def softmax_loss_grad(W: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float, n_total: int = None):
    """Cross-entropy with an L2 penalty, and its gradient.

    ``X`` carries a trailing column of ones; the matching last row of ``W`` is
    the bias and is not penalized. The loss is
    ``mean(CE) + l2 / (2 * n_total) * ||W[:-1]||^2`` so that ``l2`` has the same
    scale as a penalty on the summed loss.
    """
    n = X.shape[0]
    n_total = n if n_total is None else n_total
    P = softmax(X @ W)
    loss = -np.sum(Y * np.log(np.maximum(P, 1e-300))) / n
    loss += 0.5 * l2 / n_total * np.sum(W[:-1] ** 2)
    grad = X.T @ (P - Y) / n
    grad[:-1] += l2 / n_total * W[:-1]
    return loss, grad


class LogisticRegressionClassifier(ClassifierMixin, BaseEstimator):
    def __init__(self, n_epochs=100, learning_rate=0.1, l2_lambda=1.0, batch_size=256, random_state=0):
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.l2_lambda = l2_lambda
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) < 2:
            raise ValueError("training data must contain at least two classes")
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        self.coef_ = np.zeros((X.shape[1] + 1, len(classes)))
        self.loss_curve_ = []
        self.epochs_done_ = 0
        self._descend(X, y, self.n_epochs)
        return self

    def _design(self, X):
        Z = (X - self.mean_) / self.scale_
        return np.hstack([Z, np.ones((len(Z), 1))])

    def _descend(self, X, y, n_epochs):
        Xd = self._design(X)
        Y = (y[:, None] == self.classes_[None, :]).astype(float)
        n = len(Xd)
        bs = max(1, min(self.batch_size, n))
        for _ in range(n_epochs):
            rng = np.random.RandomState((self.random_state + self.epochs_done_) % (2 ** 32))
            order = rng.permutation(n)
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                _, g = softmax_loss_grad(self.coef_, Xd[idx], Y[idx], self.l2_lambda, n)
                self.coef_ -= self.learning_rate * g
            self.epochs_done_ += 1
            self.loss_curve_.append(float(softmax_loss_grad(self.coef_, Xd, Y, self.l2_lambda)[0]))

    def continue_fit(self, X, y, n_epochs):
        """Warm-started gradient descent on new data; unseen labels get zero weights.

        Standardization statistics from the original fit are kept.
        """
        check_is_fitted(self, "coef_")
        if n_epochs <= 0:
            return self
        X, y = check_X_y(X, y, dtype=np.float64)
        new = np.setdiff1d(np.unique(y), self.classes_)
        if len(new):
            merged = np.union1d(self.classes_, new)
            coef = np.zeros((self.coef_.shape[0], len(merged)))
            coef[:, np.searchsorted(merged, self.classes_)] = self.coef_
            self.classes_, self.coef_ = merged, coef
        self._descend(X, y, n_epochs)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._design(X) @ self.coef_

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[argmax_toward_zero(self.predict_proba(X), self.classes_)]

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "params": self.get_params(),
            "classes": [int(c) for c in self.classes_],
            "n_features": int(self.n_features_in_),
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "coef": self.coef_.tolist(),
            "epochs_done": int(self.epochs_done_),
            "loss_curve": list(self.loss_curve_),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticRegressionClassifier":
        est = cls(**d["params"])
        est.classes_ = np.array(d["classes"], dtype=np.int64)
        est.n_features_in_ = int(d["n_features"])
        est.mean_ = np.array(d["mean"], dtype=float)
        est.scale_ = np.array(d["scale"], dtype=float)
        est.coef_ = np.array(d["coef"], dtype=float)
        est.epochs_done_ = int(d["epochs_done"])
        est.loss_curve_ = list(d["loss_curve"])
        return est
