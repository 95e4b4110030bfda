"""scikit-learn style classifier wrapping model construction, training and conversion."""
from __future__ import annotations

import copy
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .convert import CostReport, profile
from .model import Network, convert_network
from .train import Trainer, TrainConfig, predict_logits


def default_layers(out_channels: int = 16, k: int = 1) -> List[dict]:
    """One SAL block followed by global pooling and a linear classifier."""
    return [
        {"kind": "sal", "out": out_channels, "k": k},
        {"kind": "bn"},
        {"kind": "relu"},
        {"kind": "avgpool"},
        {"kind": "linear", "out": "classes"},
    ]


def _resolve_layers(layers, n_classes: int) -> List[dict]:
    out = copy.deepcopy(layers)
    for layer in out:
        if layer.get("out") == "classes":
            layer["out"] = n_classes
    return out


class SALClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier whose attention layers can be binarised into shift layers.

    ``X`` has shape (n_samples, C, H, W). ``layers`` is a list of layer dicts
    as accepted by :class:`~salshift.model.ModelSpec`; ``"out": "classes"``
    is replaced by the number of classes seen in ``fit``. ``None`` uses
    :func:`default_layers`.
    """

    def __init__(self, layers=None, epochs: int = 10, batch_size: int = 32, lr0: float = 0.1,
                 momentum: float = 0.9, drop_every: int = 100, weight_decay: float = 0.0,
                 t0: float = 6.7, tf: float = 0.02, alpha: Optional[float] = None, k: int = 1,
                 random_state: int = 0):
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.momentum = momentum
        self.drop_every = drop_every
        self.weight_decay = weight_decay
        self.t0 = t0
        self.tf = tf
        self.alpha = alpha
        self.k = k
        self.random_state = random_state

    def _validate_X(self, X, reset: bool):
        X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64])
        if X.ndim != 4:
            raise ValueError(f"expected X of shape (n_samples, C, H, W), got {X.shape}")
        if reset:
            self.input_shape_ = X.shape[1:]
            self.n_features_in_ = int(np.prod(X.shape[1:]))
        elif X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, estimator was fit on {self.input_shape_}")
        return X

    def _config(self, n_classes: int) -> TrainConfig:
        layers = self.layers if self.layers is not None else default_layers(k=self.k)
        model = {"input_shape": list(self.input_shape_), "classes": n_classes,
                 "layers": _resolve_layers(layers, n_classes)}
        return TrainConfig(model=model, data={"kind": "arrays"}, epochs=self.epochs, batch=self.batch_size,
                           seed=self.random_state, lr0=self.lr0, momentum=self.momentum,
                           drop_every=self.drop_every, weight_decay=self.weight_decay, t0=self.t0, tf=self.tf,
                           alpha=self.alpha)

    def fit(self, X, y):
        X = self._validate_X(X, reset=True)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-d with {len(X)} entries, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples from at least 2 classes")
        trainer = Trainer(self._config(len(self.classes_)), len(X))
        trainer.fit(X, encoded.astype(np.int64))
        self.network_ = trainer.net
        self.converted_ = False
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = self._validate_X(X, reset=False)
        return predict_logits(self.network_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def convert(self, verify: bool = True) -> "SALClassifier":
        """A copy whose SAL layers are replaced by their binarised shift layers."""
        check_is_fitted(self, "network_")
        other = copy.copy(self)
        other.network_ = convert_network(self.network_, verify=verify)
        other.converted_ = True
        return other

    def cost_report(self) -> CostReport:
        check_is_fitted(self, "network_")
        return profile(self.network_, tuple(self.input_shape_))

    @property
    def network(self) -> Network:
        check_is_fitted(self, "network_")
        return self.network_
