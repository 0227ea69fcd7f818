"""scikit-learn style classifiers around the two attention networks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .graph import FeatureGraph, LabeledExample, stratified_split
from .models import TRANS_GAT, TRANS_SLE, ModelSpec, TransGAT, TransSLE
from .train import TrainConfig, predict_scores, select_threshold, train_model
from .validation import check_binary_labels, check_pairs, check_views


def _holdout(X, y, fraction: float, seed: int):
    """Stratified train/validation cut used when no ``eval_set`` is given."""
    examples = [LabeledExample((i, i + 1), int(label), 0) for i, label in enumerate(y)]
    bundle = stratified_split(examples, (1.0 - 2 * fraction, fraction, fraction), seed)
    tr = np.array([e.pair[0] for e in bundle.train + bundle.test])
    va = np.array([e.pair[0] for e in bundle.val])
    tr.sort()
    return X[tr], y[tr], X[va], y[va]


class _AttentionClassifier(ClassifierMixin, BaseEstimator):
    _kind: str

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, clip_norm=self.clip_norm, dropout_rate=self.dropout,
                           seed=self.random_state)

    def _fit_network(self, X, y, eval_set):
        y = check_binary_labels(y, len(X))
        if eval_set is None:
            X, y, X_val, y_val = _holdout(X, y, self.validation_fraction, self.random_state)
        else:
            X_val, y_val = self._check_X(eval_set[0]), check_binary_labels(eval_set[1])
        self.record_ = {} if self.record else None
        self.log_ = train_model(self.network_, X, y, X_val, y_val, self._train_config(), record=self.record_)
        val_scores = predict_scores(self.network_, X_val)
        self.threshold_ = select_threshold(val_scores, y_val)
        self.classes_ = np.array([0, 1])
        self.n_epochs_ = self.log_.epochs_run
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        p = predict_scores(self.network_, self._check_X(X))
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        return np.concatenate([self.network_.logits(X[i:i + 1024]).data for i in range(0, len(X), 1024)])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)

    def score(self, X, y, sample_weight=None):
        from .train import macro_f1

        return macro_f1(self.predict(X), y)


class TransSLEClassifier(_AttentionClassifier):
    """Attention fusion over frozen per-layer edge views.

    ``X`` holds edge views, either ``(n, l, d_model)`` or flattened
    ``(n, l * d_model)`` as produced by ``Node2VecEmbedder.transform``
    (then ``n_layers`` is required).
    """

    _kind = TRANS_SLE

    def __init__(self, n_layers=None, use_layer_codes=True, feedforward=True, dropout=0.2, lr=1e-3,
                 batch_size=256, max_epochs=200, patience=10, clip_norm=1.0, validation_fraction=0.15,
                 random_state=42, record=False):
        self.n_layers = n_layers
        self.use_layer_codes = use_layer_codes
        self.feedforward = feedforward
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.record = record

    def _check_X(self, X):
        return check_views(X, getattr(self, "n_layers_", self.n_layers))

    def fit(self, X, y, eval_set=None):
        X = self._check_X(X)
        self.n_layers_ = X.shape[1]
        if X.shape[2] % 2:
            raise ValueError("view width must be even (two concatenated node embeddings)")
        self.spec_ = ModelSpec(TRANS_SLE, self.n_layers_, X.shape[2] // 2, use_layer_codes=self.use_layer_codes,
                               feedforward=self.feedforward, dropout=self.dropout)
        self.network_ = TransSLE(self.spec_, seed=self.random_state)
        return self._fit_network(X, y, eval_set)


class TransGATClassifier(_AttentionClassifier):
    """Per-layer GAT encoders with attention fusion for one target layer.

    ``features`` is a :class:`FeatureGraph` guarding the target layer; ``X``
    is an ``(n, 2)`` array of node pairs.
    """

    _kind = TRANS_GAT

    def __init__(self, features=None, d_node=32, use_layer_codes=True, feedforward=True, self_loops=True,
                 gat_depth=1, nonlinearity="elu", cls_mode="replace", init_features=None, dropout=0.2, lr=1e-3,
                 batch_size=256, max_epochs=200, patience=10, clip_norm=1.0, validation_fraction=0.15,
                 random_state=42, record=False):
        self.features = features
        self.d_node = d_node
        self.use_layer_codes = use_layer_codes
        self.feedforward = feedforward
        self.self_loops = self_loops
        self.gat_depth = gat_depth
        self.nonlinearity = nonlinearity
        self.cls_mode = cls_mode
        self.init_features = init_features
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.record = record

    def _check_X(self, X):
        return check_pairs(X, self.features.node_count)

    def fit(self, X, y, eval_set=None):
        if not isinstance(self.features, FeatureGraph):
            raise TypeError("TransGATClassifier needs a FeatureGraph as `features`")
        X = self._check_X(X)
        self.spec_ = ModelSpec(
            TRANS_GAT, self.features.n_layers, self.d_node, target_layer=self.features.target,
            use_layer_codes=self.use_layer_codes, feedforward=self.feedforward, dropout=self.dropout,
            node_count=self.features.node_count, self_loops=self.self_loops, gat_depth=self.gat_depth,
            nonlinearity=self.nonlinearity, cls_mode=self.cls_mode,
        )
        self.network_ = TransGAT(self.spec_, self.features, seed=self.random_state,
                                 init_features=self.init_features)
        return self._fit_network(X, y, eval_set)


def checkpoint_parameters(estimator) -> list[ag.Parameter]:
    check_is_fitted(estimator, "network_")
    return estimator.network_.parameters()
