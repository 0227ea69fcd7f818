"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_pairs(X, node_count: int | None = None) -> np.ndarray:
    """Validate an ``(n, 2)`` integer array of node pairs."""
    arr = np.asarray(X)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected node pairs of shape (n, 2), got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("node pairs must be integer ids")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError("node ids must be non-negative")
    if node_count is not None and arr.size and arr.max() >= node_count:
        raise ValueError(f"node id {arr.max()} out of range for {node_count} nodes")
    return arr


def check_binary_labels(y, n: int | None = None) -> np.ndarray:
    arr = np.asarray(y).reshape(-1)
    if n is not None and len(arr) != n:
        raise ValueError(f"got {len(arr)} labels for {n} samples")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return arr.astype(np.int64)


def check_views(X, n_layers: int | None = None) -> np.ndarray:
    """Accept ``(n, l, d)`` view stacks or their flattened ``(n, l * d)`` form."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        if n_layers is None:
            raise ValueError("flattened views need n_layers to be reshaped")
        if arr.shape[1] % n_layers:
            raise ValueError(f"feature width {arr.shape[1]} is not divisible by {n_layers} layers")
        arr = arr.reshape(len(arr), n_layers, -1)
    if arr.ndim != 3:
        raise ValueError(f"expected views of shape (n, l, d_model), got {arr.shape}")
    if n_layers is not None and arr.shape[1] != n_layers:
        raise ValueError(f"expected {n_layers} views per pair, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("views contain non-finite values")
    return arr


def check_scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = check_binary_labels(labels)
    if len(s) != len(y):
        raise ValueError(f"scores and labels differ in length ({len(s)} vs {len(y)})")
    if len(s) == 0:
        raise ValueError("empty input")
    return s, y
