from .gbt import GradientBoostedClassifier
from .logreg import LogisticRegressionClassifier
from .model import (Dataset, ModelArtifact, SchemaError, TrainConfig, fine_tune, impute_stop,
                    load_model, permutation_importance, predict, save_model, train)

__all__ = ["GradientBoostedClassifier", "LogisticRegressionClassifier", "Dataset", "ModelArtifact",
           "SchemaError", "TrainConfig", "fine_tune", "impute_stop", "load_model",
           "permutation_importance", "predict", "save_model", "train"]
