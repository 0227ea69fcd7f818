"""Per-layer Node2Vec embeddings and multi-view edge sequences."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import NonFiniteError, fingerprint
from .graph import FeatureGraph, LayerGraph, MultiplexGraph, canonical
from .validation import check_pairs

log = logging.getLogger(__name__)

TABLE_MAGIC = b"N2VT"
TABLE_VERSION = 1


@dataclass(frozen=True)
class Node2VecConfig:
    d_node: int = 64
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 40
    walks_per_node: int = 10
    window: int = 5
    negatives_per_positive: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    seed: int = 42

    def __post_init__(self):
        if self.d_node < 2:
            raise ValueError("d_node must be >= 2")
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if min(self.walks_per_node, self.window, self.epochs) < 1:
            raise ValueError("walks_per_node, window and epochs must be >= 1")
        if self.negatives_per_positive < 0 or self.learning_rate <= 0:
            raise ValueError("invalid negatives_per_positive or learning_rate")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def transition_probs(layer: LayerGraph, prev: int | None, cur: int, p: float, q: float) -> np.ndarray:
    """Next-hop distribution over ``layer.adjacency[cur]``.

    Without a previous node the step is uniform.  Otherwise the
    unnormalised weight is 1/p for returning to ``prev``, 1 for a neighbour
    of ``prev`` and 1/q for anything further out.
    """
    nbrs = layer.adjacency[cur]
    if prev is None:
        return np.full(len(nbrs), 1.0 / len(nbrs))
    prev_nbrs = set(layer.adjacency[prev])
    w = np.array([1.0 / p if x == prev else (1.0 if x in prev_nbrs else 1.0 / q) for x in nbrs])
    return w / w.sum()


def generate_walks(
    layer: LayerGraph,
    config: Node2VecConfig,
    seed: int | Sequence[int] | None = None,
    record: list | None = None,
) -> list[list[int]]:
    """Second-order biased random walks from every non-isolated node.

    When ``record`` is a list, each step's transition distribution is
    appended to it.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    adj = layer.adjacency
    starts = np.array([n for n in range(layer.node_count) if adj[n]], dtype=np.int64)
    if len(starts) == 0:
        return []
    cache: dict[tuple[int, int], np.ndarray] = {}
    first: dict[int, np.ndarray] = {}
    walks = []
    for _ in range(config.walks_per_node):
        for start in rng.permutation(starts):
            walk = [int(start)]
            draws = rng.random(config.walk_length - 1)
            for step in range(config.walk_length - 1):
                cur = walk[-1]
                if len(walk) == 1:
                    cdf = first.get(cur)
                    if cdf is None:
                        probs = transition_probs(layer, None, cur, config.p, config.q)
                        cdf = first[cur] = np.cumsum(probs)
                else:
                    key = (walk[-2], cur)
                    cdf = cache.get(key)
                    if cdf is None:
                        probs = transition_probs(layer, walk[-2], cur, config.p, config.q)
                        cdf = cache[key] = np.cumsum(probs)
                if record is not None:
                    record.append(np.diff(cdf, prepend=0.0))
                idx = min(int(np.searchsorted(cdf, draws[step] * cdf[-1], side="right")), len(cdf) - 1)
                walk.append(adj[cur][idx])
            walks.append(walk)
    return walks


def _context_pairs(walks: list[list[int]], window: int) -> np.ndarray:
    out = []
    for walk in walks:
        w = np.asarray(walk, dtype=np.int64)
        n = len(w)
        for off in range(1, window + 1):
            if off >= n:
                break
            out.append(np.stack([w[:-off], w[off:]], axis=1))
            out.append(np.stack([w[off:], w[:-off]], axis=1))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out)


@njit(cache=True)
def _sgns_epoch(table, context, pairs, order, negatives, lrs):
    """One pass of sequential skip-gram updates; returns the summed loss."""
    d = table.shape[1]
    grad_in = np.empty(d)
    total = 0.0
    for i in range(order.shape[0]):
        c = pairs[order[i], 0]
        lr = lrs[i]
        grad_in[:] = 0.0
        for j in range(negatives.shape[1] + 1):
            if j == 0:
                o, label = pairs[order[i], 1], 1.0
            else:
                o, label = negatives[i, j - 1], 0.0
            score = 0.0
            for t in range(d):
                score += table[c, t] * context[o, t]
            # log sigmoid of +score for the positive, -score for negatives
            z = score if label == 1.0 else -score
            total += np.log1p(np.exp(-z)) if z > 0 else -z + np.log1p(np.exp(z))
            g = 1.0 / (1.0 + np.exp(-score)) - label
            for t in range(d):
                grad_in[t] += g * context[o, t]
                context[o, t] -= lr * g * table[c, t]
        for t in range(d):
            table[c, t] -= lr * grad_in[t]
    return total


def train_skipgram(
    walks: list[list[int]],
    node_count: int,
    config: Node2VecConfig,
    seed: int | Sequence[int] | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Skip-gram with negative sampling over a walk corpus.

    Pairs are visited one at a time in a seeded order with a linearly
    decaying learning rate.  Returns the input-side embedding matrix
    ``(node_count, d_node)`` and the mean per-pair loss of every epoch.
    Nodes absent from the corpus keep zero rows.
    """
    d = config.d_node
    table = np.zeros((node_count, d))
    pairs = _context_pairs(walks, config.window)
    if len(pairs) == 0:
        return table, []
    rng = np.random.default_rng(config.seed if seed is None else seed)

    counts = np.bincount(np.concatenate([np.asarray(w) for w in walks]), minlength=node_count).astype(float)
    present = counts > 0
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    table[present] = (rng.random((int(present.sum()), d)) - 0.5) / d
    context = np.zeros((node_count, d))
    n = len(pairs)
    total = config.epochs * n
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        negatives = np.minimum(
            np.searchsorted(noise_cdf, rng.random((n, config.negatives_per_positive)), side="right"),
            node_count - 1)
        done = epoch * n + np.arange(n)
        lrs = config.learning_rate * np.maximum(1e-4, 1.0 - done / total)
        loss = _sgns_epoch(table, context, pairs, order, negatives, lrs) / n
        if not np.isfinite(loss) or not np.all(np.isfinite(table)):
            raise NonFiniteError(f"skip-gram loss became non-finite at epoch {epoch}")
        curve.append(float(loss))
        log.debug("skip-gram epoch %d loss %.5f", epoch, loss)
    table[~present] = 0.0
    return table, curve


def layer_seed(seed: int, layer_index: int) -> list[int]:
    return [int(seed), int(layer_index)]


def embed_layer(layer: LayerGraph, config: Node2VecConfig, layer_index: int) -> tuple[np.ndarray, list[float]]:
    walks = generate_walks(layer, config, seed=layer_seed(config.seed, layer_index))
    return train_skipgram(walks, layer.node_count, config, seed=layer_seed(config.seed, layer_index) + [1])


def embed_multiplex(graph: MultiplexGraph | FeatureGraph, config: Node2VecConfig) -> np.ndarray:
    """Embedding tables for every layer, shape ``(l, N, d_node)``."""
    get = graph.layer if isinstance(graph, FeatureGraph) else graph.layers.__getitem__
    return np.stack([embed_layer(get(m), config, m)[0] for m in range(graph.n_layers)])


# ---------------------------------------------------------------------------
# edge views


@dataclass(frozen=True)
class EdgeViewSequence:
    pair: tuple[int, int]
    views: np.ndarray  # (l, 2 * d_node)

    @property
    def d_model(self) -> int:
        return self.views.shape[1]


def _check_tables(tables) -> np.ndarray:
    if isinstance(tables, np.ndarray):
        if tables.ndim != 3:
            raise ValueError(f"embedding tables must be (layers, nodes, dim), got {tables.shape}")
        return tables
    shapes = {np.shape(t) for t in tables}
    if len(shapes) != 1:
        raise ValueError(f"embedding tables disagree in shape: {sorted(shapes)}")
    return np.stack([np.asarray(t, dtype=float) for t in tables])


def build_edge_views(pair, tables) -> EdgeViewSequence:
    tables = _check_tables(tables)
    u, v = canonical(int(pair[0]), int(pair[1]))
    return EdgeViewSequence((u, v), np.concatenate([tables[:, u], tables[:, v]], axis=1))


def edge_view_array(pairs, tables) -> np.ndarray:
    """Vectorised :func:`build_edge_views`: ``(n, l, 2 * d_node)``."""
    tables = _check_tables(tables)
    pairs = np.sort(check_pairs(pairs, tables.shape[1]), axis=1)
    left = tables[:, pairs[:, 0]]
    right = tables[:, pairs[:, 1]]
    return np.transpose(np.concatenate([left, right], axis=2), (1, 0, 2))


# ---------------------------------------------------------------------------
# persistence


def save_embeddings(path, tables: np.ndarray, config: Node2VecConfig, extra: dict | None = None) -> None:
    path = Path(path)
    tables = _check_tables(tables)
    layers, nodes, dim = tables.shape
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<IIII", TABLE_VERSION, nodes, dim, layers))
        fh.write(np.ascontiguousarray(tables, dtype="<f4").tobytes())
    sidecar = {"config": config.to_dict(), "fingerprint": config.fingerprint(), **(extra or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_embeddings(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != TABLE_MAGIC:
            raise ValueError(f"{path}: not an embedding table file")
        version, nodes, dim, layers = struct.unpack("<IIII", fh.read(16))
        if version != TABLE_VERSION:
            raise ValueError(f"{path}: unsupported table version {version}")
        data = np.frombuffer(fh.read(4 * layers * nodes * dim), dtype="<f4")
    sidecar_path = path.with_suffix(path.suffix + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return data.reshape(layers, nodes, dim).astype(np.float64), sidecar


# ---------------------------------------------------------------------------
# estimator


class Node2VecEmbedder(TransformerMixin, BaseEstimator):
    """Per-layer Node2Vec features for node pairs.

    ``graph`` is the feature source (a :class:`MultiplexGraph` or a guarded
    :class:`FeatureGraph`).  ``fit`` ignores ``X`` and learns one table per
    layer; ``transform`` maps an ``(n, 2)`` pair array to flattened edge
    views of shape ``(n, l * 2 * d_node)``.
    """

    def __init__(self, graph=None, d_node=64, p=1.0, q=1.0, walk_length=40, walks_per_node=10,
                 window=5, negatives_per_positive=5, epochs=5, learning_rate=0.025, random_state=42):
        self.graph = graph
        self.d_node = d_node
        self.p = p
        self.q = q
        self.walk_length = walk_length
        self.walks_per_node = walks_per_node
        self.window = window
        self.negatives_per_positive = negatives_per_positive
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def config(self) -> Node2VecConfig:
        return Node2VecConfig(
            d_node=self.d_node, p=self.p, q=self.q, walk_length=self.walk_length,
            walks_per_node=self.walks_per_node, window=self.window,
            negatives_per_positive=self.negatives_per_positive, epochs=self.epochs,
            learning_rate=self.learning_rate, seed=self.random_state,
        )

    def fit(self, X=None, y=None):
        if self.graph is None:
            raise ValueError("Node2VecEmbedder needs a graph")
        self.tables_ = embed_multiplex(self.graph, self.config())
        self.n_layers_ = self.tables_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "tables_")
        views = edge_view_array(X, self.tables_)
        return views.reshape(len(views), -1)

