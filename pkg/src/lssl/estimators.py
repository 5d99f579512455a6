"""scikit-learn style estimators around the LSSL model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .layer import init_model
from .tasks import Dataset, legs_memory
from .training import predict as _predict
from .training import train_model

__all__ = [
    "check_sequences",
    "check_sequence_targets",
    "LSSLClassifier",
    "LSSLRegressor",
    "HippoTransformer",
]


def check_sequences(X, *, min_length=1):
    """Validate a batch of sequences.

    Returns a float64 array of shape ``(n, L, d)``; ``(n, L)`` input gets a
    trailing feature axis.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=True)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ValueError(f"expected (n, L) or (n, L, d) sequences, got shape {X.shape}")
    if X.shape[1] < min_length:
        raise ValueError(f"sequences must have length >= {min_length}, got {X.shape[1]}")
    return X


def check_sequence_targets(y, X):
    """Regression targets: ``(n,)`` per sequence or ``(n, L)`` per step."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} sequences but y has {y.shape[0]} targets")
    if y.ndim == 2 and y.shape[1] != X.shape[1]:
        raise ValueError(f"per-step targets must have length {X.shape[1]}, got {y.shape[1]}")
    if y.ndim not in (1, 2):
        raise ValueError(f"y must be (n,) or (n, L), got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return y


class _LSSLBase(BaseEstimator):
    def __init__(self, H=32, N=64, M=1, depth=2, dt_min=1e-2, dt_max=1e-1, family="legs",
                 mode="fixed", norm="post", pooling="auto", lr=3e-3, batch_size=32,
                 epochs=10, validation_fraction=0.1, random_state=0, verbose=False):
        self.H = H
        self.N = N
        self.M = M
        self.depth = depth
        self.dt_min = dt_min
        self.dt_max = dt_max
        self.family = family
        self.mode = mode
        self.norm = norm
        self.pooling = pooling
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _fit(self, X, y, task_kind, outputs, pooling):
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = init_model(X.shape[2], outputs, H=self.H, N=self.N, M=self.M,
                                 depth=self.depth, dt_min=self.dt_min, dt_max=self.dt_max,
                                 seed=seed, family=self.family, mode=self.mode,
                                 norm=self.norm, pooling=pooling)
        order = np.random.default_rng(seed).permutation(X.shape[0])
        n_val = int(round(self.validation_fraction * X.shape[0]))
        val_idx, tr_idx = order[:n_val], order[n_val:]
        train = Dataset(X[tr_idx], y[tr_idx], "train", task_kind)
        val = Dataset(X[val_idx], y[val_idx], "val", task_kind) if n_val else None

        def log(epoch, split, loss, metric, wall):
            if self.verbose:
                print(f"epoch {epoch} {split} loss={loss:.5g} metric={metric:.5g}")

        result = train_model(self.model_, train, val, epochs=self.epochs, lr=self.lr,
                             batch_size=self.batch_size, seed=seed, on_epoch=log)
        self.history_ = result.history
        self.n_features_in_ = X.shape[2]
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input features, got {X.shape[2]}")
        return _predict(self.model_, X)


class LSSLClassifier(ClassifierMixin, _LSSLBase):
    """Sequence classifier: pooled LSSL features, softmax head, cross-entropy."""

    def fit(self, X, y):
        X = check_sequences(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        pooling = "mean" if self.pooling == "auto" else self.pooling
        if pooling == "none":
            raise ValueError("classification needs a pooled output (mean or last)")
        return self._fit(X, encoded.astype(np.int64), "classify", len(self.classes_), pooling)

    def predict_proba(self, X):
        logits = self._forward(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._forward(X)
        return self.classes_[np.argmax(logits, axis=1)]


class LSSLRegressor(RegressorMixin, _LSSLBase):
    """Regression on sequences with squared loss.

    ``y`` of shape ``(n,)`` predicts one value per sequence (pooled);
    ``(n, L)`` predicts one value per time step (no pooling).
    """

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_sequence_targets(y, X)
        if self.pooling == "auto":
            pooling = "none" if y.ndim == 2 else "mean"
        else:
            pooling = self.pooling
        if (pooling == "none") != (y.ndim == 2):
            raise ValueError("per-step targets need pooling='none'; per-sequence targets need pooling")
        self.per_step_ = y.ndim == 2
        return self._fit(X, y, "regress", 1, pooling)

    def predict(self, X):
        return self._forward(X)[..., 0]


class HippoTransformer(TransformerMixin, BaseEstimator):
    """Map each sequence to the scaled-Legendre coefficients of its whole history.

    Parameters
    ----------
    N : int
        Number of coefficients per input feature.
    """

    def __init__(self, N=32):
        self.N = N

    def fit(self, X, y=None):
        X = check_sequences(X, min_length=2)
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_sequences(X, min_length=2)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input features, got {X.shape[2]}")
        n, L, d = X.shape
        U = np.transpose(X, (1, 0, 2)).reshape(L, n * d)
        coef = legs_memory(U, self.N)  # (N, n*d)
        return coef.reshape(self.N, n, d).transpose(1, 2, 0).reshape(n, d * self.N)
