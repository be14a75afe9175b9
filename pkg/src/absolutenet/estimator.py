"""scikit-learn compatible wrapper around :class:`AbsoluteNet`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import AbsoluteNet, ModelConfig
from .training import TrainConfig, predict_labels, stratified_folds, train


def check_epochs(X, n_channels: int | None = None, n_samples: int | None = None) -> np.ndarray:
    """Validate an ``(n_trials, n_channels, n_samples[, 1])`` epoch array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected epochs of shape (n_trials, n_channels, n_samples), got {X.shape}")
    if n_channels is not None and X.shape[1:] != (n_channels, n_samples):
        raise ValueError(f"expected epochs with {n_channels} channels x {n_samples} samples, "
                         f"got {X.shape[1:]}")
    return X


class AbsoluteNetClassifier(ClassifierMixin, BaseEstimator):
    """Binary epoch classifier (class 0 standard, class 1 deviant).

    Parameters
    ----------
    variant : str, default "full"
        One of the architecture variants in :data:`absolutenet.model.VARIANTS`.
        The spatial kernel always spans the channel count seen in ``fit``.
    learning_rate : float, default 9e-4
    epochs : int, default 30
        Epochs of training; the lowest-validation-loss checkpoint is kept
        when ``validation_fraction > 0``.
    batch_size : int, default 32
    validation_fraction : float, default 0.25
        Fraction of the training data held out (stratified) for checkpoint
        selection; 0 trains on everything and keeps the final weights.
    temporal_kernel, separable_kernel, pool_size, pool_stride : int
        Architecture hyperparameters.
    dropout : float, default 0.3
    random_state : int, default 0
    """

    def __init__(self, variant="full", learning_rate=9e-4, epochs=30, batch_size=32,
                 validation_fraction=0.25, temporal_kernel=5, separable_kernel=3, pool_size=25,
                 pool_stride=8, dropout=0.3, random_state=0):
        self.variant = variant
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.temporal_kernel = temporal_kernel
        self.separable_kernel = separable_kernel
        self.pool_size = pool_size
        self.pool_stride = pool_stride
        self.dropout = dropout
        self.random_state = random_state

    def _model_config(self, n_channels, n_samples) -> ModelConfig:
        return ModelConfig(input_channels=n_channels, input_samples=n_samples, spatial_kernel=n_channels,
                           temporal_kernel=self.temporal_kernel, separable_kernel=self.separable_kernel,
                           pool_size=self.pool_size, pool_stride=self.pool_stride, dropout=self.dropout,
                           variant=self.variant)

    def fit(self, X, y):
        X = check_epochs(X)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"AbsoluteNetClassifier is binary; got classes {self.classes_}")
        y_idx = np.searchsorted(self.classes_, y)
        n_channels, n_samples = X.shape[1:]
        seed = int(self.random_state or 0)
        cfg = TrainConfig(learning_rate=self.learning_rate, epochs_select=self.epochs,
                          batch_size=self.batch_size, seed=seed)
        self.model_ = AbsoluteNet(self._model_config(n_channels, n_samples), seed=seed)
        if self.validation_fraction:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must be in [0, 1)")
            n_folds = max(2, int(round(1 / self.validation_fraction)))
            split = stratified_folds(y_idx, n_folds, seed)[0]
            val = split.test
            tr = np.setdiff1d(np.arange(len(y_idx)), val)
            self.report_, _ = train(self.model_, X[tr], y_idx[tr], X[val], y_idx[val], cfg)
        else:
            self.report_, _ = train(self.model_, X, y_idx, config=cfg)
        self.n_features_in_ = n_channels * n_samples
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        c = self.model_.config
        X = check_epochs(X, c.input_channels, c.input_samples)
        return self.model_.forward(X, "infer")

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[predict_labels(self.predict_proba(X))]
