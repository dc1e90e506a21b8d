"""scikit-learn compatible wrapper around the training procedure."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .augment import AugmentConfig
from .data import N_CLASSES, Dataset, train_val_split
from .trainer import TrainConfig, fit
from .validation import check_frames, check_labels


class GearboxCNNClassifier(ClassifierMixin, BaseEstimator):
    """Residual 1-D CNN for five-class gearbox fault frames.

    Accepts ``[N, 3, 200]`` frames or flat ``[N, 600]`` channel-major rows.
    Without an explicit validation set, ``fit`` holds out a stratified 20% of
    the training data for checkpoint selection and the learning-rate schedule.
    """

    def __init__(
        self,
        batch_size=32,
        lr0=0.001,
        weight_decay=5e-5,
        lr_factor=0.8,
        lr_patience=5,
        improve_threshold=0.01,
        min_epochs=65,
        stop_patience=25,
        max_epochs=120,
        augment=True,
        random_state=0,
    ):
        self.batch_size = batch_size
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.lr_factor = lr_factor
        self.lr_patience = lr_patience
        self.improve_threshold = improve_threshold
        self.min_epochs = min_epochs
        self.stop_patience = stop_patience
        self.max_epochs = max_epochs
        self.augment = augment
        self.random_state = random_state

    def _train_config(self):
        aug = self.augment
        if aug is True:
            aug = AugmentConfig()
        elif not aug:
            aug = AugmentConfig.disabled()
        return TrainConfig(
            batch_size=self.batch_size,
            lr0=self.lr0,
            weight_decay=self.weight_decay,
            lr_factor=self.lr_factor,
            lr_patience=self.lr_patience,
            improve_threshold=self.improve_threshold,
            min_epochs=min(self.min_epochs, self.max_epochs),
            stop_patience=self.stop_patience,
            max_epochs=self.max_epochs,
            seed=int(self.random_state or 0),
            augment=aug,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_frames(X)
        y = check_labels(y, len(X))
        config = self._train_config()
        if X_val is None:
            ds = Dataset(X, y, np.ones(len(y), dtype=np.int64))
            tr, val = train_val_split(ds, np.arange(len(y)), 0.8, seed=config.seed)
            X, y, X_val, y_val = X[tr], y[tr], X[val], y[val]
            ids = tr
        else:
            X_val = check_frames(X_val)
            y_val = check_labels(y_val, len(X_val))
            ids = None
        result = fit(X, y, X_val, y_val, config, sample_ids=ids)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.state.best_epoch
        self.classes_ = np.arange(N_CLASSES)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return M.predict_proba(self.params_, check_frames(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_frames(X)
        chunks = [M.forward(self.params_, X[i : i + 256], train=False)[0] for i in range(0, len(X), 256)]
        return np.concatenate(chunks)

    @property
    def n_parameters_(self):
        check_is_fitted(self, "params_")
        return M.parameter_count(self.params_)
