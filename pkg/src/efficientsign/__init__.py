"""EfficientSign: channel + spatial attention on an MBConv backbone, in numpy.

Includes the training and stratified cross-validation harness, classical
classifiers on deep features, the EFSN checkpoint container and a CLI.
"""

from .checkpoint import load_checkpoint, load_features, save_checkpoint, save_features
from .classical import KNearestNeighborsClassifier, LBFGSLogisticRegression, SMOSupportVectorClassifier
from .data import AugmentConfig, Dataset, FoldPlan, load_dataset, preprocess, stratified_kfold, synth_generate
from .errors import (CheckpointCorruptionError, CheckpointFormatError, ConfigurationError, EfficientSignError,
                     IncompatibleCheckpointError, InputError, NumericError, TrainingError)
from .estimators import DeepFeatureExtractor, EfficientSignClassifier
from .models import ModelSpec, build_model, count_params, extract_features, forward
from .reporting import CVConfig, MetricsReport, aggregate, run_cv
from .tensor import Parameter, Tensor, no_grad
from .training import TrainConfig, cosine_lr, evaluate, train_fold

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CVConfig", "CheckpointCorruptionError", "CheckpointFormatError", "ConfigurationError",
    "Dataset", "DeepFeatureExtractor", "EfficientSignClassifier", "EfficientSignError", "FoldPlan",
    "IncompatibleCheckpointError", "InputError", "KNearestNeighborsClassifier", "LBFGSLogisticRegression",
    "MetricsReport", "ModelSpec", "NumericError", "Parameter", "SMOSupportVectorClassifier", "Tensor",
    "TrainConfig", "TrainingError", "aggregate", "build_model", "cosine_lr", "count_params", "evaluate",
    "extract_features", "forward", "load_checkpoint", "load_dataset", "load_features", "no_grad", "preprocess",
    "run_cv", "save_checkpoint", "save_features", "stratified_kfold", "synth_generate", "train_fold",
]
