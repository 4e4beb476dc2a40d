"""Train, apply, fine-tune and persist delta-label classifiers."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.inspection import permutation_importance as _sk_permutation_importance
from sklearn.metrics import make_scorer

from ..features import FEATURE_NAMES, FeatureVector, LatenessTable
from .gbt import GradientBoostedClassifier
from .logreg import LogisticRegressionClassifier

SCHEMA_VERSION = 1
LEARNERS = ("gbt", "logreg")


class SchemaError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray  # delta values, not class indices
    feature_names: Tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.y) < 1:
            raise ValueError("Dataset needs a 2-D X with one label per row and n >= 1")
        if self.X.shape[1] != len(self.feature_names):
            raise SchemaError(f"{self.X.shape[1]} columns but {len(self.feature_names)} feature names")

    @property
    def class_map(self) -> Dict[int, int]:
        return dict(enumerate(int(c) for c in np.unique(self.y)))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass
class TrainConfig:
    learner: str = "gbt"
    rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    l2_lambda: float = 1.0
    seed: int = 0
    min_child_weight: float = 1.0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")


@dataclass
class ModelArtifact:
    learner: str
    estimator: Union[GradientBoostedClassifier, LogisticRegressionClassifier]
    feature_names: Tuple[str, ...] = FEATURE_NAMES
    lateness: Optional[LatenessTable] = None
    metadata: dict = field(default_factory=dict)

    @property
    def classes(self) -> np.ndarray:
        return self.estimator.classes_

    @property
    def class_map(self) -> Dict[int, int]:
        return {i: int(c) for i, c in enumerate(self.estimator.classes_)}

    def predict_proba(self, X) -> np.ndarray:
        return self.estimator.predict_proba(self._check(X))

    def predict_delta(self, X) -> np.ndarray:
        return self.estimator.predict(self._check(X))

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaError(f"expected rows of {len(self.feature_names)} features, got shape {X.shape}")
        return X

    # persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "learner": self.learner,
            "feature_names": list(self.feature_names),
            "class_map": {str(i): d for i, d in self.class_map.items()},
            "lateness_table": self.lateness.to_dict() if self.lateness else None,
            "metadata": self.metadata,
            "estimator": self.estimator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelArtifact":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported model schema version {d.get('schema_version')!r}")
        kind = d["learner"]
        est_cls = GradientBoostedClassifier if kind == "gbt" else LogisticRegressionClassifier
        lt = d.get("lateness_table")
        return cls(kind, est_cls.from_dict(d["estimator"]), tuple(d["feature_names"]),
                   LatenessTable.from_dict(lt) if lt else None, dict(d.get("metadata", {})))


def save_model(model: ModelArtifact, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path: str) -> ModelArtifact:
    with open(path) as fh:
        return ModelArtifact.from_dict(json.load(fh))


def _check_schema(data: Dataset) -> None:
    if tuple(data.feature_names) != FEATURE_NAMES:
        raise SchemaError("dataset columns do not match the 15-feature schema")


def train(data: Dataset, cfg: TrainConfig, lateness: Optional[LatenessTable] = None) -> ModelArtifact:
    """Fit the configured learner on ``data``."""
    _check_schema(data)
    if not np.all(np.isfinite(data.X)):
        raise ValueError("non-finite feature values in training data")
    if len(np.unique(data.y)) < 2:
        raise ValueError("training data must contain at least two classes")
    if cfg.learner == "gbt":
        est = GradientBoostedClassifier(n_rounds=cfg.rounds, max_depth=cfg.max_depth,
                                        learning_rate=cfg.learning_rate, l2_lambda=cfg.l2_lambda,
                                        min_child_weight=cfg.min_child_weight, random_state=cfg.seed)
    else:
        est = LogisticRegressionClassifier(n_epochs=cfg.rounds, learning_rate=cfg.learning_rate,
                                           l2_lambda=cfg.l2_lambda, random_state=cfg.seed)
    est.fit(data.X, data.y)
    meta = {"train_config": asdict(cfg), "data_hash": data.digest(), "n_train": int(len(data.y)),
            "fine_tunes": []}
    return ModelArtifact(cfg.learner, est, FEATURE_NAMES, lateness, meta)


def _as_row(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.to_array()[None, :]
    if isinstance(x, Mapping):
        missing = [n for n in FEATURE_NAMES if n not in x]
        if missing:
            raise SchemaError(f"feature mapping lacks {missing}")
        return np.array([[float(x[n]) for n in FEATURE_NAMES]])
    return np.asarray(x, dtype=float).reshape(1, -1)


def predict(model: ModelArtifact, x) -> Tuple[Dict[int, float], int]:
    """Class distribution over delta values and the most likely delta for one row."""
    row = _as_row(x)
    p = model.predict_proba(row)[0]
    dhat = int(model.predict_delta(row)[0])
    return {int(c): float(v) for c, v in zip(model.classes, p)}, dhat


def impute_sequences(S: np.ndarray, dhat: np.ndarray, n_stops: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(S) + np.asarray(dhat), 1, np.asarray(n_stops))


def impute_stop(model: ModelArtifact, record, x) -> str:
    """Stop id at ``clamp(S + predicted delta, 1, trip length)``."""
    _, dhat = predict(model, x)
    seq = int(impute_sequences(record.S, dhat, len(record.trip.events)))
    return record.trip.stop_ids[seq - 1]


def fine_tune(model: ModelArtifact, new_data: Dataset, extra_rounds: int) -> ModelArtifact:
    """Continue training on a new dataset without modifying ``model``.

    Boosted models gain ``extra_rounds`` rounds with their earlier trees frozen;
    logistic models continue gradient descent for ``extra_rounds`` epochs.
    """
    _check_schema(new_data)
    tuned = copy.deepcopy(model)
    if extra_rounds <= 0:
        return tuned
    if model.learner == "gbt":
        tuned.estimator.boost_more(new_data.X, new_data.y, extra_rounds)
    else:
        tuned.estimator.continue_fit(new_data.X, new_data.y, extra_rounds)
    tuned.metadata = copy.deepcopy(model.metadata)
    tuned.metadata.setdefault("fine_tunes", []).append(
        {"extra_rounds": int(extra_rounds), "data_hash": new_data.digest(), "n": int(len(new_data.y))})
    return tuned


def _accuracy(y_true, y_pred):
    return float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))


def permutation_importance(model: ModelArtifact, data: Dataset,
                           metric: Optional[Callable] = None, seed: int = 0,
                           n_repeats: int = 5) -> List[Tuple[str, float]]:
    """Features ranked by mean metric drop when their column is shuffled.

    ``metric(y_true, y_pred)`` scores delta predictions, higher is better;
    plain accuracy by default.
    """
    if len(data.y) == 0:
        raise ValueError("empty dataset")
    scorer = make_scorer(metric or _accuracy)
    res = _sk_permutation_importance(model.estimator, data.X, data.y, scoring=scorer,
                                     n_repeats=n_repeats, random_state=seed)
    means = res.importances_mean
    order = sorted(range(len(means)), key=lambda j: (-means[j], j))
    return [(data.feature_names[j], float(means[j])) for j in order]
