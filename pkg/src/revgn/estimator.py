"""scikit-learn style estimators around the RevMLP trainers.

Inputs follow the sklearn convention ``(n_samples, n_features)``; they are
transposed to the column-per-sample layout internally.  Features are
zero-padded so the network width is even and at least the number of outputs.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import data, losses, optim, revnet

_DEFAULT_LR = {"gn": 1.0, "sgd": 0.1, "adam": 1e-3}


def _width(n_features, n_outputs):
    d = max(n_features, n_outputs)
    return d + (d % 2)


def _pad(x, d):
    # x: (n_samples, n_features) -> (d, n_samples)
    out = np.zeros((d, x.shape[0]))
    out[: x.shape[1]] = x.T
    return out


class _RevGNBase(BaseEstimator):
    _loss = None

    def __init__(self, d_prime=256, n_blocks=2, optimizer="gn", lr=None, pinv="truncate",
                 epochs=10, batch_size=None, init="gaussian", weight_decay=0.0,
                 random_state=0):
        self.d_prime = d_prime
        self.n_blocks = n_blocks
        self.optimizer = optimizer
        self.lr = lr
        self.pinv = pinv
        self.epochs = epochs
        self.batch_size = batch_size
        self.init = init
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _make_optimizer(self):
        if self.optimizer not in optim.OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        lr = _DEFAULT_LR[self.optimizer] if self.lr is None else self.lr
        if self.optimizer == "gn":
            cfg = optim.GNConfig(lr, optim.make_pinv_policy(self.pinv, seed=self.random_state),
                                 self.weight_decay)
        elif self.optimizer == "sgd":
            cfg = optim.SGDConfig(lr, self.weight_decay)
        else:
            cfg = optim.AdamConfig(lr, weight_decay=self.weight_decay)
        return optim.OPTIMIZERS[self.optimizer](cfg)

    def _fit(self, x, targets, d_y):
        self.n_features_in_ = x.shape[1]
        d = _width(x.shape[1], d_y)
        xt = _pad(x, d)
        n = xt.shape[1]
        self.model_ = revnet.init(d, self.d_prime, self.n_blocks, d_y,
                                  seed=self.random_state, scheme=self.init)
        opt = self._make_optimizer()
        ds = data.Dataset(xt, targets, "array", d_y)
        batch = n if self.batch_size is None else min(self.batch_size, n)
        if self.optimizer == "gn" and batch > self.model_.d_prime:
            raise ValueError(f"batch of {batch} exceeds d_prime={self.d_prime}; "
                             "set batch_size <= d_prime for Gauss-Newton")
        plan = data.BatchPlan(n, batch, self.random_state)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            for _ in range(plan.batches_per_epoch):
                xb, yb = data.next_batch(ds, plan)
                opt.step(self.model_, xb, yb, self._loss)
            f = revnet.logits(revnet.forward(self.model_, xt)[0], d_y)
            self.loss_curve_.append(losses.loss_value(self._loss, f, targets))
        return self

    def _logits(self, x):
        check_is_fitted(self, "model_")
        x = check_array(x)
        if x.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {x.shape[1]}")
        y, _ = revnet.forward(self.model_, _pad(x, self.model_.d))
        return revnet.logits(y, self.model_.d_y).T


class RevGNClassifier(ClassifierMixin, _RevGNBase):
    """Cross-entropy classifier trained with layer-wise Gauss-Newton (or SGD/Adam)."""

    _loss = losses.CROSS_ENTROPY

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return self._fit(X, self._encoder.transform(y).astype(np.int64), len(self.classes_))

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        return losses.softmax(self._logits(X).T).T

    def predict(self, X):
        return self.classes_[np.argmax(self._logits(X), axis=1)]


class RevGNRegressor(RegressorMixin, _RevGNBase):
    """Square-loss regressor; ``y`` may be 1-D or ``(n_samples, n_targets)``."""

    _loss = losses.SQUARE

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = np.asarray(y, dtype=np.float64)
        self._single = y.ndim == 1
        targets = y[:, None].T if self._single else y.T
        return self._fit(X, np.ascontiguousarray(targets), targets.shape[0])

    def predict(self, X):
        out = self._logits(X)
        return out[:, 0] if self._single else out
