"""Impute missing boarding stops in smart-card transit data."""
__version__ = "0.1.0"

from .afc import AfcRecord, JoinedRecord, load_afc, preprocess_and_join
from .features import FEATURE_NAMES, FeatureExtractor, FeatureVector
from .gtfs import GtfsFeed, parse_feed, scheduled_position
from .learn import (Dataset, GradientBoostedClassifier, LogisticRegressionClassifier, ModelArtifact,
                    TrainConfig, fine_tune, load_model, predict, save_model, train)
from .metrics import MetricsReport, evaluate, pareto_accuracy

__all__ = [
    "AfcRecord", "JoinedRecord", "load_afc", "preprocess_and_join",
    "FEATURE_NAMES", "FeatureExtractor", "FeatureVector",
    "GtfsFeed", "parse_feed", "scheduled_position",
    "Dataset", "GradientBoostedClassifier", "LogisticRegressionClassifier", "ModelArtifact",
    "TrainConfig", "fine_tune", "load_model", "predict", "save_model", "train",
    "MetricsReport", "evaluate", "pareto_accuracy",
]
