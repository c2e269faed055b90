"""scikit-learn wrappers: an end-to-end image classifier and a deep-feature transformer.

Both take image batches shaped ``N x H x W x 3`` (or ``N x H x W`` grayscale)
with values in [0, 255]. The transformer composes with the classical
classifiers, e.g. ``make_pipeline(DeepFeatureExtractor(...), SMOSupportVectorClassifier())``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from .data import AugmentConfig, dataset_from_arrays, preprocess
from .errors import InputError
from .models import ModelSpec, build_model, extract_features
from .training import TrainConfig, model_from_result, predict_classes, train_fold


def check_images(X):
    """Validate an image batch and return it as ``N x H x W x 3`` uint8."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None, ensure_min_samples=1)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=-1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise InputError(f"expected N x H x W x 3 images, got shape {X.shape}")
    if X.dtype != np.uint8:
        if X.min() < 0 or X.max() > 255:
            raise InputError("image values must lie in [0, 255]")
        X = np.rint(X).astype(np.uint8)
    return X


def _eval_batch(X, size):
    aug = AugmentConfig.no_augmentation(size)
    return np.stack([preprocess(img, "eval", aug) for img in X])


class EfficientSignClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes a fresh network on ``fit`` and classifies images on ``predict``.

    With ``validation_fraction=0`` the final epoch is kept; otherwise a
    stratified holdout picks the best epoch, as in cross-validation.
    """

    def __init__(self, method="efficientsign", preset="b0", epochs=12, lr=1e-4, batch_size=32,
                 image_size=224, augment=True, validation_fraction=0.0, seed=42, verbose=False):
        self.method = method
        self.preset = preset
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.image_size = image_size
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.verbose = verbose

    def _spec(self, num_classes):
        if self.method == "efficientsign":
            return ModelSpec.efficientsign(self.preset, num_classes=num_classes)
        return ModelSpec.baseline(self.method, num_classes=num_classes)

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise InputError(f"{len(X)} images but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputError("need at least two classes")
        dataset = dataset_from_arrays(list(X), y_idx)
        idx = np.arange(len(X))
        aug = (AugmentConfig(target_size=self.image_size) if self.augment
               else AugmentConfig.no_augmentation(self.image_size))
        cfg = TrainConfig(epochs=self.epochs, base_lr=self.lr, batch_size=self.batch_size,
                          seed=self.seed, augment=aug)
        spec = self._spec(len(self.classes_))
        if self.validation_fraction > 0:
            tr, va = train_test_split(idx, test_size=self.validation_fraction, stratify=y_idx,
                                      random_state=self.seed)
            result = train_fold(spec, dataset, tr, va, cfg, verbose=self.verbose)
        else:
            # a strictly increasing score keeps the last epoch
            result = train_fold(spec, dataset, idx, idx[:1], cfg, verbose=self.verbose,
                                evaluator=lambda model, epoch: epoch)
        self.model_ = model_from_result(spec, result)
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        return self.classes_[predict_classes(self.model_, _eval_batch(X, self.image_size))]

    def transform(self, X):
        """Post-attention pooled features of the fitted network."""
        check_is_fitted(self, "model_")
        return extract_features(self.model_, _eval_batch(check_images(X), self.image_size))


class DeepFeatureExtractor(TransformerMixin, BaseEstimator):
    """Maps images to pooled backbone features of a loaded or freshly built network."""

    def __init__(self, checkpoint=None, preset="b0", image_size=224, seed=42, batch_size=64):
        self.checkpoint = checkpoint
        self.preset = preset
        self.image_size = image_size
        self.seed = seed
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.checkpoint is not None:
            from .checkpoint import load_checkpoint

            self.model_ = load_checkpoint(self.checkpoint, expect_kind="efficientsign")
        else:
            self.model_ = build_model(ModelSpec.efficientsign(self.preset), self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        return extract_features(self.model_, _eval_batch(X, self.image_size), self.batch_size)
