"""Weighted BCE training with early stopping; metrics and the common-neighbour baseline live here too."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .graph import FeatureGraph, MultiplexGraph
from .validation import check_binary_labels, check_pairs, check_scores_labels

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    clip_norm: float = 1.0
    dropout_rate: float = 0.2
    class_weighting: str = "balanced"
    seed: int = 42

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.patience, self.clip_norm) <= 0:
            raise ValueError("lr, batch_size, max_epochs, patience and clip_norm must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.class_weighting != "balanced":
            raise ValueError(f"unsupported class weighting {self.class_weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss


def class_weights(labels) -> tuple[float, float]:
    """Balanced weights ``n / (2 n_class)`` as ``(w_neg, w_pos)``."""
    y = check_binary_labels(labels)
    n, n_pos = len(y), int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present in the training labels")
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


def weighted_bce(probs: Tensor, labels, weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Mean of ``-w_y [y ln p + (1 - y) ln(1 - p)]`` with p clamped to [1e-7, 1 - 1e-7]."""
    probs = ag.as_tensor(probs)
    y = np.asarray(labels, dtype=ag.DTYPE).reshape(probs.shape)
    w = np.where(y == 1, weights[1], weights[0])
    p = ag.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = ag.mul(ag.log(p), y) + ag.mul(ag.log(1.0 - p), 1.0 - y)
    return ag.mean(ag.mul(ll, -w))


# ---------------------------------------------------------------------------
# metrics


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def macro_f1(predictions, labels) -> float:
    """Unweighted mean of the positive- and negative-class F1 (0/0 counts as 0)."""
    pred = check_binary_labels(predictions)
    y = check_binary_labels(labels)
    if len(pred) != len(y):
        raise ValueError("predictions and labels differ in length")
    if len(y) == 0:
        raise ValueError("empty input")
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return 0.5 * (_f1(tp, fp, fn) + _f1(tn, fn, fp))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s, y = check_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=float))
    mids = (u[1:] + u[:-1]) / 2.0
    return np.unique(np.append(mids, 0.5))


def select_threshold(val_scores, val_labels) -> float:
    """Threshold (predict positive when ``score >= t``) maximising validation macro-F1.

    Candidates are midpoints between adjacent distinct scores plus 0.5;
    ties go to the smallest candidate.
    """
    s, y = check_scores_labels(val_scores, val_labels)
    best_t, best = 0.5, -1.0
    for t in threshold_candidates(s):
        f = macro_f1((s >= t).astype(int), y)
        if f > best:
            best_t, best = float(t), f
    return best_t


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_macro_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_macro_f1"])
        for row in zip(self.epochs, self.train_loss, self.val_macro_f1):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def predict_scores(network, X, batch_size: int = 1024, record: dict | None = None) -> np.ndarray:
    """Eval-mode probabilities for all rows of ``X``."""
    out = []
    for start in range(0, len(X), batch_size):
        out.append(network.forward(X[start:start + batch_size], training=False, record=record).data)
    return np.concatenate(out) if out else np.empty(0)


def train_model(network, X_train, y_train, X_val, y_val, config: TrainConfig,
                record: dict | None = None) -> EpochLog:
    """Minibatch Adam on balanced weighted BCE with early stopping.

    Validation is scored at threshold 0.5 after every epoch.  Training stops
    after ``patience`` epochs without a strict improvement in validation
    macro-F1, and the first best snapshot is restored.
    """
    y_train = check_binary_labels(y_train, len(X_train))
    y_val = check_binary_labels(y_val, len(X_val))
    weights = class_weights(y_train)
    params = network.parameters()
    rng = np.random.default_rng(config.seed)
    logbook = EpochLog()
    best_f1, best_state, since_best = -1.0, None, 0
    n = len(y_train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                probs = network.forward(X_train[idx], training=True, rng=rng, record=record)
                loss = weighted_bce(probs, y_train[idx], weights)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch at offset {start}: {exc}") from exc
            ag.backward(loss, params)
            ag.clip_global_norm(params, config.clip_norm)
            ag.adam_step(params, config.lr)
            losses.append(loss.item() * len(idx))
        val_f1 = macro_f1((predict_scores(network, X_val, record=record) >= 0.5).astype(int), y_val)
        logbook.epochs.append(epoch)
        logbook.train_loss.append(float(np.sum(losses) / n))
        logbook.val_macro_f1.append(val_f1)
        log.debug("epoch %d loss %.5f val macro-F1 %.4f", epoch, logbook.train_loss[-1], val_f1)
        if val_f1 > best_f1:
            best_f1, best_state, since_best = val_f1, network.state_dict(), 0
            logbook.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    network.load_state_dict(best_state)
    return logbook


def evaluate(network, X_test, y_test, threshold: float) -> dict:
    scores = predict_scores(network, X_test)
    return evaluate_scores(scores, y_test, threshold)


def evaluate_scores(scores, y_test, threshold: float) -> dict:
    s, y = check_scores_labels(scores, y_test)
    result = {"macro_f1": macro_f1((s >= threshold).astype(int), y), "roc_auc": None}
    if len(np.unique(y)) < 2:
        warnings.warn("test split has a single class; ROC-AUC omitted", RuntimeWarning, stacklevel=2)
    else:
        result["roc_auc"] = roc_auc(s, y)
    return result


# ---------------------------------------------------------------------------
# baseline


def common_neighbor_counts(pairs, graph: MultiplexGraph | FeatureGraph, target: int) -> np.ndarray:
    """``|N(u) & N(v)|`` on the union of all non-target layers."""
    n = graph.node_count
    get = graph.layer if isinstance(graph, FeatureGraph) else graph.layers.__getitem__
    adj = np.zeros((n, n), dtype=bool)
    for m in range(graph.n_layers):
        if m != target:
            adj |= get(m).adjacency_matrix()
    pairs = check_pairs(pairs, n)
    a = adj.astype(np.int64)
    return np.einsum("ij,ij->i", a[pairs[:, 0]], a[pairs[:, 1]])


def baseline_common_neighbors(pairs, graph: MultiplexGraph | FeatureGraph, target: int) -> np.ndarray:
    """Common-neighbour counts min-max scaled to [0, 1]."""
    counts = common_neighbor_counts(pairs, graph, target).astype(float)
    if len(counts) == 0:
        return counts
    lo, hi = counts.min(), counts.max()
    return np.zeros_like(counts) if hi == lo else (counts - lo) / (hi - lo)
