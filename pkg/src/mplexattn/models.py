"""Cross-layer attention networks: static-view fusion and per-layer GAT fusion.

Both networks read a sequence of per-layer edge views for a node pair,
run one single-head self-attention layer over it, and classify the pair
from the output at the CLS position.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .graph import FeatureGraph

TRANS_SLE = "trans_sle"
TRANS_GAT = "trans_gat"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_layers: int
    d_node: int
    target_layer: int = 0
    use_layer_codes: bool = True
    feedforward: bool = True
    dropout: float = 0.2
    # GAT only
    node_count: int = 0
    self_loops: bool = True
    gat_depth: int = 1
    nonlinearity: str = "elu"
    leaky_slope: float = 0.2
    cls_mode: str = "replace"

    def __post_init__(self):
        if self.kind not in (TRANS_SLE, TRANS_GAT):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_layers < 2 or self.d_node < 1:
            raise ValueError("need n_layers >= 2 and d_node >= 1")
        if not 0 <= self.target_layer < self.n_layers:
            raise ValueError(f"target layer {self.target_layer} out of range")
        if self.kind == TRANS_GAT:
            if self.node_count < 1:
                raise ValueError("trans_gat needs node_count")
            if self.nonlinearity not in ("elu", "relu"):
                raise ValueError(f"unsupported GAT nonlinearity {self.nonlinearity!r}")
            if self.cls_mode not in ("replace", "append"):
                raise ValueError(f"cls_mode must be 'replace' or 'append', got {self.cls_mode!r}")
            if self.gat_depth < 1:
                raise ValueError("gat_depth must be >= 1")

    @property
    def d_model(self) -> int:
        return 2 * self.d_node

    def to_dict(self) -> dict:
        return asdict(self)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def _bias(rng: np.random.Generator, fan_in: int, size: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


def aux_layers(spec: ModelSpec) -> list[int]:
    return [m for m in range(spec.n_layers) if m != spec.target_layer]


def init_parameters(spec: ModelSpec, seed: int) -> dict[str, Parameter]:
    """Xavier-uniform matrices, N(0, 0.02^2) CLS and layer codes, U(+-1/sqrt(fan_in)) biases."""
    rng = np.random.default_rng(seed)
    d = spec.d_model
    params: dict[str, np.ndarray] = {}
    for name in ("W_q", "W_k", "W_v"):
        params[f"attn.{name}"] = _xavier(rng, d, d)
    params["attn.cls"] = rng.normal(0.0, 0.02, size=d)
    params["attn.layer_codes"] = rng.normal(0.0, 0.02, size=(spec.n_layers, d))
    if spec.feedforward:
        params["ff.W1"] = _xavier(rng, d, d)
        params["ff.b1"] = _bias(rng, d, d)
        params["ff.W2"] = _xavier(rng, d, d)
        params["ff.b2"] = _bias(rng, d, d)
    params["head.W"] = _xavier(rng, d, 1, shape=(1, d))
    params["head.b"] = _bias(rng, d, 1)
    if spec.kind == TRANS_GAT:
        k = spec.d_node
        params["gat.features"] = rng.normal(0.0, 1.0, size=(spec.node_count, k))
        for m in aux_layers(spec):
            for depth in range(spec.gat_depth):
                params[f"gat.{m}.{depth}.W"] = _xavier(rng, k, k)
                params[f"gat.{m}.{depth}.a"] = _xavier(rng, 2 * k, 1, shape=(2 * k,))
    return {name: Parameter(value, name) for name, value in params.items()}


# ---------------------------------------------------------------------------
# building blocks


def self_attention_forward(x: Tensor, params: dict[str, Parameter], record: list | None = None) -> Tensor:
    """Single-head scaled dot-product self-attention over the token axis.

    ``x`` has shape ``(..., T, d_model)``; scores are scaled by
    ``1 / sqrt(d_model)``.  Attention matrices are appended to ``record``.
    """
    x = ag.as_tensor(x)
    if x.shape[-2] < 2:
        raise ValueError("attention needs at least two tokens")
    d = x.shape[-1]
    q = x @ params["attn.W_q"]
    k = x @ params["attn.W_k"]
    v = x @ params["attn.W_v"]
    scores = ag.mul(q @ ag.swapaxes(k, -1, -2), 1.0 / np.sqrt(d))
    alpha = ag.softmax(scores, axis=-1)
    if record is not None:
        record.append(alpha.data.copy())
    return alpha @ v


def feedforward(z: Tensor, params: dict[str, Parameter]) -> Tensor:
    hidden = ag.relu(z @ params["ff.W1"] + params["ff.b1"])
    return z + hidden @ params["ff.W2"] + params["ff.b2"]


def classifier_logit(z_cls: Tensor, params: dict[str, Parameter]) -> Tensor:
    out = z_cls @ ag.transpose(params["head.W"]) + params["head.b"]
    return ag.reshape(out, (z_cls.shape[0],))


def gat_forward(
    features: Tensor,
    mask: np.ndarray,
    W: Parameter,
    a: Parameter,
    slope: float = 0.2,
    nonlinearity: str = "elu",
    record: list | None = None,
) -> Tensor:
    """One graph-attention layer on a dense neighbourhood mask.

    ``mask[i, j]`` marks ``j`` as a neighbour of ``i`` (self-loops are
    whatever the mask says).  Coefficients are a softmax over each
    neighbourhood of ``LeakyReLU(a . [W h_i || W h_j])``.
    """
    wh = features @ W
    k = wh.shape[1]
    s = ag.transpose(wh @ ag.transpose(ag.reshape(a, (2, k))))  # (2, N)
    src = ag.reshape(ag.take(s, 0), (-1, 1))
    dst = ag.reshape(ag.take(s, 1), (1, -1))
    alpha = ag.masked_softmax(ag.leaky_relu(src + dst, slope), mask, axis=1)
    if record is not None:
        record.append(alpha.data[mask.any(axis=1)].copy())
    out = alpha @ wh
    return ag.elu(out) if nonlinearity == "elu" else ag.relu(out)


def _tokens(parts: Sequence[Tensor]) -> Tensor:
    """Stack per-position ``(B, d)`` tensors into ``(B, T, d)``."""
    return ag.concat([ag.reshape(p, (p.shape[0], 1, p.shape[1])) for p in parts], axis=1)


# ---------------------------------------------------------------------------
# networks


class _Network:
    spec: ModelSpec
    params: dict[str, Parameter]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=ag.DTYPE)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data = value.copy()

    def _fuse(self, tokens: Tensor, cls_index: int, training: bool, rng, record) -> Tensor:
        z = self_attention_forward(tokens, self.params, record)
        if self.spec.feedforward:
            z = feedforward(z, self.params)
        z_cls = ag.reshape(ag.take(ag.swapaxes(z, 0, 1), cls_index), (tokens.shape[0], tokens.shape[2]))
        z_cls = ag.dropout(z_cls, self.spec.dropout, training, rng)
        return classifier_logit(z_cls, self.params)

    def forward(self, X, training: bool = False, rng=None, record: dict | None = None) -> Tensor:
        return ag.sigmoid(self.logits(X, training, rng, record))


class TransSLE(_Network):
    """Attention over frozen static edge views with a prepended CLS token.

    Input is a float array ``(B, l, d_model)``; the views are plain arrays,
    so no gradient can reach the embedding tables.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Parameter] | None = None, seed: int = 0):
        if spec.kind != TRANS_SLE:
            raise ValueError("TransSLE needs a trans_sle spec")
        self.spec = spec
        self.params = params if params is not None else init_parameters(spec, seed)

    def sequence(self, views: np.ndarray) -> Tensor:
        views = np.asarray(views, dtype=ag.DTYPE)
        if views.ndim != 3 or views.shape[1] != self.spec.n_layers or views.shape[2] != self.spec.d_model:
            raise ValueError(
                f"expected views of shape (B, {self.spec.n_layers}, {self.spec.d_model}), got {views.shape}")
        b = views.shape[0]
        body = ag.Tensor(views)
        if self.spec.use_layer_codes:
            body = body + self.params["attn.layer_codes"]
        cls = ag.broadcast_to(ag.reshape(self.params["attn.cls"], (1, 1, -1)), (b, 1, self.spec.d_model))
        return ag.concat([cls, body], axis=1)

    def logits(self, views, training: bool = False, rng=None, record: dict | None = None) -> Tensor:
        attn = record.setdefault("attention", []) if record is not None else None
        return self._fuse(self.sequence(views), 0, training, rng, attn)


class TransGAT(_Network):
    """Per-layer GAT encoders fused by attention; the target slot holds CLS.

    The target layer has no encoder.  Its adjacency is never requested from
    the :class:`FeatureGraph`, whose guard raises if anything tries.
    """

    def __init__(self, spec: ModelSpec, features: FeatureGraph, params: dict[str, Parameter] | None = None,
                 seed: int = 0, init_features: np.ndarray | None = None):
        if spec.kind != TRANS_GAT:
            raise ValueError("TransGAT needs a trans_gat spec")
        if features.target != spec.target_layer or features.node_count != spec.node_count:
            raise ValueError("feature graph does not match the model spec")
        self.spec = spec
        self.params = params if params is not None else init_parameters(spec, seed)
        if init_features is not None:
            self.params["gat.features"].data = np.array(init_features, dtype=ag.DTYPE).reshape(
                self.params["gat.features"].shape)
        self.masks = {m: features.layer(m).adjacency_matrix(self_loops=spec.self_loops) for m in aux_layers(spec)}

    def node_embeddings(self, training: bool = False, rng=None, record: list | None = None) -> dict[int, Tensor]:
        out = {}
        for m, mask in self.masks.items():
            h = self.params["gat.features"]
            for depth in range(self.spec.gat_depth):
                h = gat_forward(h, mask, self.params[f"gat.{m}.{depth}.W"], self.params[f"gat.{m}.{depth}.a"],
                                self.spec.leaky_slope, self.spec.nonlinearity, record)
            out[m] = ag.dropout(h, self.spec.dropout, training, rng)
        return out

    def sequence(self, pairs: np.ndarray, embeddings: dict[int, Tensor]) -> tuple[Tensor, int]:
        pairs = np.sort(np.asarray(pairs, dtype=np.int64), axis=1)
        b, d = len(pairs), self.spec.d_model
        cls = ag.broadcast_to(ag.reshape(self.params["attn.cls"], (1, -1)), (b, d))
        parts = []
        for m in range(self.spec.n_layers):
            if m == self.spec.target_layer:
                parts.append(cls if self.spec.cls_mode == "replace" else ag.Tensor(np.zeros((b, d))))
            else:
                h = embeddings[m]
                parts.append(ag.concat([ag.take(h, pairs[:, 0]), ag.take(h, pairs[:, 1])], axis=-1))
        tokens = _tokens(parts)
        if self.spec.use_layer_codes:
            tokens = tokens + self.params["attn.layer_codes"]
        if self.spec.cls_mode == "append":
            tokens = ag.concat([_tokens([cls]), tokens], axis=1)
            return tokens, 0
        return tokens, self.spec.target_layer

    def logits(self, pairs, training: bool = False, rng=None, record: dict | None = None) -> Tensor:
        gat_rec = record.setdefault("gat", []) if record is not None else None
        attn = record.setdefault("attention", []) if record is not None else None
        tokens, cls_index = self.sequence(pairs, self.node_embeddings(training, rng, gat_rec))
        return self._fuse(tokens, cls_index, training, rng, attn)


def build_network(spec: ModelSpec, seed: int, features: FeatureGraph | None = None,
                  init_features: np.ndarray | None = None) -> _Network:
    if spec.kind == TRANS_SLE:
        return TransSLE(spec, seed=seed)
    if features is None:
        raise ValueError("trans_gat needs a feature graph")
    return TransGAT(spec, features, seed=seed, init_features=init_features)
