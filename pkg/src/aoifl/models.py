"""Flat-parameter classifiers for the federated simulator.

Parameters are a single 1-D vector so that clients exchange and the server
averages plain arrays.  Two families are provided: multinomial logistic
regression and a one-hidden-layer ReLU network.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "DivergenceError",
    "SoftmaxModel",
    "MLPModel",
    "make_model",
    "log_softmax",
    "sgd_epochs",
    "SGDClassifierNP",
]


class DivergenceError(ArithmeticError):
    """Non-finite loss or weights during training."""

    def __init__(self, message: str, round: int | None = None):
        super().__init__(message)
        self.round = round


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cross_entropy(logits, y):
    logp = log_softmax(logits)
    loss = -logp[np.arange(y.shape[0]), y].mean()
    probs = np.exp(logp)
    probs[np.arange(y.shape[0]), y] -= 1.0
    return loss, probs / y.shape[0]  # dloss/dlogits


class SoftmaxModel:
    """Multinomial logistic regression; ``w = [W (d x C) row-major, b (C)]``."""

    name = "logistic"

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)

    @property
    def n_params(self) -> int:
        return self.n_features * self.n_classes + self.n_classes

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def _unpack(self, w):
        d, c = self.n_features, self.n_classes
        return w[: d * c].reshape(d, c), w[d * c:]

    def logits(self, w, X):
        W, b = self._unpack(w)
        return X @ W + b

    def loss(self, w, X, y) -> float:
        logp = log_softmax(self.logits(w, X))
        return float(-logp[np.arange(y.shape[0]), y].mean())

    def loss_grad(self, w, X, y):
        W, b = self._unpack(w)
        loss, dz = _cross_entropy(X @ W + b, y)
        return loss, np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])


class MLPModel:
    """One hidden ReLU layer: ``softmax(relu(X W1 + b1) W2 + b2)``."""

    name = "mlp"

    def __init__(self, n_features: int, n_classes: int, hidden: int = 64):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = int(hidden)

    @property
    def n_params(self) -> int:
        d, h, c = self.n_features, self.hidden, self.n_classes
        return d * h + h + h * c + c

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = np.random.default_rng(0) if rng is None else rng
        d, h, c = self.n_features, self.hidden, self.n_classes
        w1 = rng.standard_normal((d, h)) * np.sqrt(2.0 / d)
        w2 = rng.standard_normal((h, c)) * np.sqrt(1.0 / h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def _unpack(self, w):
        d, h, c = self.n_features, self.hidden, self.n_classes
        i = 0
        w1 = w[i:i + d * h].reshape(d, h); i += d * h
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + h * c].reshape(h, c); i += h * c
        b2 = w[i:i + c]
        return w1, b1, w2, b2

    def logits(self, w, X):
        w1, b1, w2, b2 = self._unpack(w)
        return np.maximum(X @ w1 + b1, 0.0) @ w2 + b2

    def loss(self, w, X, y) -> float:
        logp = log_softmax(self.logits(w, X))
        return float(-logp[np.arange(y.shape[0]), y].mean())

    def loss_grad(self, w, X, y):
        w1, b1, w2, b2 = self._unpack(w)
        pre = X @ w1 + b1
        act = np.maximum(pre, 0.0)
        loss, dz = _cross_entropy(act @ w2 + b2, y)
        dact = (dz @ w2.T) * (pre > 0)
        grad = np.concatenate([
            (X.T @ dact).ravel(), dact.sum(axis=0), (act.T @ dz).ravel(), dz.sum(axis=0),
        ])
        return loss, grad


def make_model(name: str, n_features: int, n_classes: int, hidden: int = 64):
    if name == "logistic":
        return SoftmaxModel(n_features, n_classes)
    if name == "mlp":
        return MLPModel(n_features, n_classes, hidden)
    raise ValueError(f"unknown model {name!r}; expected 'logistic' or 'mlp'")


def sgd_epochs(model, w, X, y, epochs: int, batch_size: int, lr: float,
               rng: np.random.Generator) -> np.ndarray:
    """Mini-batch SGD, reshuffled every epoch.  Returns a new vector."""
    w = np.array(w, dtype=float, copy=True)
    count = y.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        return _sgd_loop(model, w, X, y, epochs, batch_size, lr, rng, count)


def _sgd_loop(model, w, X, y, epochs, batch_size, lr, rng, count):
    for _ in range(epochs):
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            batch = order[start:start + batch_size]
            loss, grad = model.loss_grad(w, X[batch], y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss}")
            w -= lr * grad
            if not np.all(np.isfinite(w)):
                raise DivergenceError("non-finite weights")
    return w


class SGDClassifierNP(ClassifierMixin, BaseEstimator):
    """Centralised reference trainer using the same models and SGD as the
    federated clients.

    Parameters
    ----------
    model : {"logistic", "mlp"}
    hidden : int
        Hidden width for ``model="mlp"``.
    lr : float
        Constant step size.
    epochs : int
    batch_size : int
    random_state : int
    """

    def __init__(self, model="logistic", hidden=64, lr=0.1, epochs=20, batch_size=50,
                 random_state=0):
        self.model = model
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        self.model_ = make_model(self.model, X.shape[1], len(self.classes_), self.hidden)
        rng = np.random.default_rng(self.random_state)
        w = self.model_.init_params(rng)
        self.params_ = sgd_epochs(self.model_, w, X, y_idx, self.epochs,
                                  self.batch_size, self.lr, rng)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.logits(self.params_, X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        # np.argmax keeps the lowest index on ties
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
