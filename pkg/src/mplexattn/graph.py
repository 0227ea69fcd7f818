"""Multiplex graph model, edge-list ingestion, candidate pools and splits."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

Pair = tuple[int, int]

TRANSDUCTIVE = "transductive_stratified"
INDUCTIVE = "inductive_node"


class EdgeListError(ValueError):
    """Malformed edge-list input."""


class StructuralError(ValueError):
    """Input parsed but does not form a usable multiplex network."""


class SplitError(ValueError):
    """A split protocol cannot produce a valid partition."""


class LeakageError(AssertionError):
    """Target-layer structure was requested while building features."""


class EdgeListWarning(UserWarning):
    """A line was dropped (self-loop or duplicate edge)."""


def canonical(u: int, v: int) -> Pair:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class LayerGraph:
    node_count: int
    edges: frozenset

    def __post_init__(self):
        for u, v in self.edges:
            if not (0 <= u < v < self.node_count):
                raise StructuralError(f"invalid edge ({u}, {v}) for {self.node_count} nodes")

    @classmethod
    def from_pairs(cls, node_count: int, pairs: Iterable[Pair]) -> "LayerGraph":
        return cls(node_count, frozenset(canonical(u, v) for u, v in pairs if u != v))

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.adjacency], dtype=np.int64)

    def adjacency_matrix(self, self_loops: bool = False) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count), dtype=bool)
        if self.edges:
            e = np.array(sorted(self.edges))
            a[e[:, 0], e[:, 1]] = True
            a[e[:, 1], e[:, 0]] = True
        if self_loops:
            np.fill_diagonal(a, True)
        return a

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, pair) -> bool:
        return canonical(*pair) in self.edges


@dataclass(frozen=True)
class MultiplexGraph:
    node_labels: tuple[str, ...]
    layers: tuple[LayerGraph, ...]
    layer_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.layer_names):
            raise StructuralError("layer_names and layers differ in length")
        if len(self.layers) < 2:
            raise StructuralError(f"a multiplex needs at least 2 layers, got {len(self.layers)}")
        if not self.node_labels:
            raise StructuralError("graph has no nodes")
        for layer in self.layers:
            if layer.node_count != len(self.node_labels):
                raise StructuralError("layer node_count disagrees with node_labels")

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        layer_edges: Sequence[Iterable[Pair]],
        layer_names: Sequence[str] | None = None,
        node_labels: Sequence[str] | None = None,
    ) -> "MultiplexGraph":
        names = tuple(layer_names) if layer_names is not None else tuple(str(i + 1) for i in range(len(layer_edges)))
        labels = tuple(node_labels) if node_labels is not None else tuple(str(i) for i in range(node_count))
        return cls(labels, tuple(LayerGraph.from_pairs(node_count, e) for e in layer_edges), names)

    @property
    def node_count(self) -> int:
        return len(self.node_labels)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def total_edges(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def replace_layer(self, index: int, edges: Iterable[Pair]) -> "MultiplexGraph":
        layers = list(self.layers)
        layers[index] = LayerGraph.from_pairs(self.node_count, edges)
        return MultiplexGraph(self.node_labels, tuple(layers), self.layer_names)

    def summary(self) -> dict:
        return {
            "nodes": self.node_count,
            "layers": [{"name": n, "edges": len(layer)} for n, layer in zip(self.layer_names, self.layers)],
            "union_size": len(build_union_pool(self)),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


# ---------------------------------------------------------------------------
# parsing


def _layer_order(names: list[str]) -> list[str]:
    try:
        return sorted(names, key=int)
    except ValueError:
        return names


def parse_multiplex_edgelist(lines: Iterable[str], format: str = "layer_first",  # noqa: A002
                             stats: dict | None = None) -> MultiplexGraph:
    """Read ``layer node node [weight]`` lines into a :class:`MultiplexGraph`.

    Node ids follow first appearance among accepted edges.  Layers are
    ordered numerically when every layer token is an integer, otherwise by
    first appearance.  Self-loops and duplicate edges are skipped; each kind
    raises one :class:`EdgeListWarning` carrying its count, and the counts
    are stored in ``stats`` when a dict is passed.  ``format="mpx"`` reads the
    ``#EDGES`` section of a multinet ``.mpx`` file (``a,b,layer`` rows).
    """
    if format == "layer_first":
        rows = _layer_first_rows(lines)
    elif format == "mpx":
        rows = _mpx_rows(lines)
    else:
        raise ValueError(f"unknown edge-list format {format!r}")

    node_ids: dict[str, int] = {}
    layer_edges: dict[str, set[Pair]] = {}
    dropped: dict[str, list[int]] = {"self-loop": [], "duplicate edge": []}
    for lineno, layer, a, b in rows:
        if a == b:
            dropped["self-loop"].append(lineno)
            continue
        seen = layer_edges.setdefault(layer, set())
        ua = node_ids.get(a)
        ub = node_ids.get(b)
        if ua is not None and ub is not None and canonical(ua, ub) in seen:
            dropped["duplicate edge"].append(lineno)
            continue
        if ua is None:
            ua = node_ids[a] = len(node_ids)
        if ub is None:
            ub = node_ids[b] = len(node_ids)
        seen.add(canonical(ua, ub))

    for kind, where in dropped.items():
        if where:
            warnings.warn(f"{len(where)} {kind}(s) dropped (first at line {where[0]})", EdgeListWarning,
                          stacklevel=2)
    if stats is not None:
        stats["self_loops"] = len(dropped["self-loop"])
        stats["duplicates"] = len(dropped["duplicate edge"])

    names = _layer_order([name for name, edges in layer_edges.items() if edges])
    if len(names) < 2:
        raise StructuralError(f"edge list has {len(names)} non-empty layer(s); a multiplex needs at least 2")
    return MultiplexGraph.from_edges(len(node_ids), [layer_edges[n] for n in names], names, list(node_ids))


def _layer_first_rows(lines):
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) not in (3, 4):
            raise EdgeListError(f"line {lineno}: expected 'layer node node [weight]', got {len(tokens)} tokens")
        if len(tokens) == 4:
            try:
                float(tokens[3])
            except ValueError:
                raise EdgeListError(f"line {lineno}: weight {tokens[3]!r} is not a number") from None
        yield lineno, tokens[0], tokens[1], tokens[2]


def _mpx_rows(lines):
    section = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            section = line[1:].strip().upper()
            continue
        if section != "EDGES":
            continue
        tokens = [t.strip() for t in line.split(",")]
        if len(tokens) < 3 or not all(tokens[:3]):
            raise EdgeListError(f"line {lineno}: expected 'a,b,layer[,...]'")
        yield lineno, tokens[2], tokens[0], tokens[1]


def load_multiplex(path, format: str | None = None, stats: dict | None = None) -> MultiplexGraph:  # noqa: A002
    path = str(path)
    if format is None:
        format = "mpx" if path.endswith(".mpx") else "layer_first"
    with open(path, encoding="utf-8") as fh:
        return parse_multiplex_edgelist(fh, format=format, stats=stats)


def format_edgelist(graph: MultiplexGraph) -> str:
    """Serialise ``graph`` so that re-parsing reproduces it exactly.

    Lines are ordered so that nodes and layers first appear in id order,
    which holds for any graph produced by :func:`parse_multiplex_edgelist`.
    """
    names, labels = graph.layer_names, graph.node_labels
    remaining = [(m, u, v) for m, layer in enumerate(graph.layers) for u, v in sorted(layer.edges)]
    next_node = 0
    # integer-named layers are re-sorted on parse, so only named layers need ordered introduction
    next_layer = len(names) if _all_int(names) else 0
    lines = []

    def emit(m, a, b):
        lines.append(f"{names[m]} {labels[a]} {labels[b]}")

    while remaining:
        chosen = None
        for idx, (m, u, v) in enumerate(remaining):
            if m > next_layer or max(u, v) >= next_node + 2:
                continue
            order = _introduction_order(u, v, next_node)
            if order is not None:
                chosen = idx, m, order
                break
        if chosen is None:
            raise StructuralError("graph node ids are not in first-appearance order; cannot serialise exactly")
        idx, m, (a, b) = chosen
        remaining.pop(idx)
        emit(m, a, b)
        next_node = max(next_node, a + 1, b + 1)
        next_layer = max(next_layer, m + 1)
    return "\n".join(lines) + "\n"


def _all_int(names) -> bool:
    try:
        [int(n) for n in names]
    except ValueError:
        return False
    return True


def _introduction_order(u: int, v: int, next_node: int):
    # both seen, or one seen plus the next id, or the next two ids in order
    if u < next_node and v < next_node:
        return u, v
    if u < next_node and v == next_node:
        return u, v
    if u == next_node and v == next_node + 1:
        return u, v
    return None


# ---------------------------------------------------------------------------
# candidate pool and labels


def max_edge_count(n_layers: int, n_nodes: int) -> int:
    """Upper bound ``l * N * (N - 1) / 2`` on multiplex edges (exact integer)."""
    if not isinstance(n_layers, (int, np.integer)) or not isinstance(n_nodes, (int, np.integer)):
        raise TypeError("layer and node counts must be integers")
    if n_layers < 1 or n_nodes < 1:
        raise ValueError("layer and node counts must be >= 1")
    result = int(n_layers) * int(n_nodes) * (int(n_nodes) - 1) // 2
    if result > np.iinfo(np.int64).max:
        raise OverflowError(f"max edge count for l={n_layers}, N={n_nodes} exceeds 64-bit range")
    return result


@dataclass(frozen=True)
class CandidatePool:
    pairs: tuple[Pair, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_array(self) -> np.ndarray:
        return np.array(self.pairs, dtype=np.int64).reshape(-1, 2)


def build_union_pool(graph: MultiplexGraph) -> CandidatePool:
    union: set[Pair] = set()
    for layer in graph.layers:
        union |= layer.edges
    return CandidatePool(tuple(sorted(union)))


@dataclass(frozen=True)
class LabeledExample:
    pair: Pair
    label: int
    target_layer: int


def label_for_target(pool: CandidatePool, graph: MultiplexGraph, target: int) -> list[LabeledExample]:
    if not 0 <= target < graph.n_layers:
        raise IndexError(f"target layer {target} out of range for {graph.n_layers} layers")
    edges = graph.layers[target].edges
    return [LabeledExample(p, int(p in edges), target) for p in pool.pairs]


def examples_to_arrays(examples: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.array([e.pair for e in examples], dtype=np.int64).reshape(-1, 2)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return pairs, labels


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitBundle:
    train: tuple[LabeledExample, ...]
    val: tuple[LabeledExample, ...]
    test: tuple[LabeledExample, ...]
    protocol: str
    seed: int
    held_out_nodes: frozenset = field(default_factory=frozenset)

    @property
    def target_layer(self) -> int:
        return self.train[0].target_layer

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return examples_to_arrays(getattr(self, name))

    def train_positive_edges(self) -> list[Pair]:
        return [e.pair for e in self.train if e.label == 1]

    def to_dict(self) -> dict:
        def rows(split):
            return [[e.pair[0], e.pair[1], e.label] for e in split]

        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "target_layer": self.target_layer,
            "held_out_nodes": sorted(self.held_out_nodes),
            "train": rows(self.train),
            "val": rows(self.val),
            "test": rows(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitBundle":
        t = d["target_layer"]

        def ex(rows):
            return tuple(LabeledExample((int(u), int(v)), int(y), t) for u, v, y in rows)

        return cls(ex(d["train"]), ex(d["val"]), ex(d["test"]), d["protocol"], int(d["seed"]),
                   frozenset(d.get("held_out_nodes", ())))


def _class_partition(indices: np.ndarray, fractions: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle one class and cut it into len(fractions) non-empty parts."""
    n = len(indices)
    k = len(fractions)
    perm = indices[rng.permutation(n)]
    sizes = [max(1, int(round(f * n))) for f in fractions[1:]]
    head = n - sum(sizes)
    if head < 1:
        raise SplitError(f"class with {n} examples cannot fill {k} splits")
    cuts = np.cumsum([head] + sizes)[:-1]
    return np.split(perm, cuts)


def stratified_split(
    examples: Sequence[LabeledExample],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 42,
) -> SplitBundle:
    """Class-stratified shuffled train/val/test partition, deterministic per seed.

    Each split keeps pool order internally.
    """
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) <= 0:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    labels = np.array([e.label for e in examples], dtype=np.int64)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 3:
            raise SplitError(f"class {cls} has {len(idx)} example(s); stratification needs at least 3")
        for slot, chunk in zip(parts, _class_partition(idx, ratios, rng)):
            slot.append(chunk)
    train, val, test = (tuple(examples[i] for i in np.sort(np.concatenate(p))) for p in parts)
    return SplitBundle(train, val, test, TRANSDUCTIVE, int(seed))


def inductive_node_split(
    graph: MultiplexGraph,
    pool: CandidatePool,
    target: int,
    holdout_fraction: float = 0.15,
    seed: int = 42,
    val_fraction: float = 0.18,
) -> SplitBundle:
    """Withhold ``ceil(holdout_fraction * N)`` nodes; test pairs touch them.

    The pairs that avoid every held-out node are split train/val
    (``1 - val_fraction`` / ``val_fraction``) stratified by class.
    """
    if not 0.0 < holdout_fraction < 0.5:
        raise ValueError(f"holdout_fraction must lie in (0, 0.5), got {holdout_fraction}")
    n = graph.node_count
    k = math.ceil(holdout_fraction * n)
    if k < 1:
        raise ValueError("holdout fraction selects no nodes")
    rng = np.random.default_rng(seed)
    held = frozenset(int(x) for x in rng.choice(n, size=k, replace=False))
    examples = label_for_target(pool, graph, target)
    test = tuple(e for e in examples if e.pair[0] in held or e.pair[1] in held)
    rest = [e for e in examples if e.pair[0] not in held and e.pair[1] not in held]
    for name, split in (("test", test), ("train", rest)):
        if len({e.label for e in split}) < 2:
            raise SplitError(f"inductive {name} side has a single class; try another seed or holdout fraction")
    labels = np.array([e.label for e in rest])
    tr_idx, va_idx = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise SplitError(f"class {cls} has {len(idx)} retained example(s); try another seed or fraction")
        tr, va = _class_partition(idx, (1.0 - val_fraction, val_fraction), rng)
        tr_idx.append(tr)
        va_idx.append(va)
    train = tuple(rest[i] for i in np.sort(np.concatenate(tr_idx)))
    val = tuple(rest[i] for i in np.sort(np.concatenate(va_idx)))
    return SplitBundle(train, val, test, INDUCTIVE, int(seed), held)


# ---------------------------------------------------------------------------
# feature access


class FeatureGraph:
    """Layer access for feature construction with a target-layer guard.

    Auxiliary layers are returned whole.  The target layer is exposed only
    as its ``allowed_target_edges`` (training positives), or refused
    entirely when ``allowed_target_edges`` is None.  Every request is
    logged in ``reads`` as ``(layer, n_edges, n_protected_edges)``.
    """

    def __init__(self, graph: MultiplexGraph, target: int, allowed_target_edges: Iterable[Pair] | None = None,
                 protected_edges: Iterable[Pair] = ()):
        self.graph = graph
        self.target = target
        self._allowed = None if allowed_target_edges is None else frozenset(
            canonical(u, v) for u, v in allowed_target_edges)
        if self._allowed is not None and not self._allowed <= graph.layers[target].edges:
            raise LeakageError("allowed target edges must be a subset of the target layer")
        self.protected = frozenset(canonical(u, v) for u, v in protected_edges)
        self.reads: list[tuple[int, int, int]] = []

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def n_layers(self) -> int:
        return self.graph.n_layers

    def layer(self, m: int) -> LayerGraph:
        if m == self.target:
            if self._allowed is None:
                raise LeakageError(f"target layer {m} is not available as a feature source")
            layer = LayerGraph(self.graph.node_count, self._allowed)
        else:
            layer = self.graph.layers[m]
        leaked = len(layer.edges & self.protected) if m == self.target else 0
        self.reads.append((m, len(layer.edges), leaked))
        return layer

    @property
    def protected_reads(self) -> int:
        return sum(r[2] for r in self.reads)

    def as_multiplex(self) -> MultiplexGraph:
        """Multiplex with the target layer cut down to its allowed edges."""
        if self._allowed is None:
            raise LeakageError("target layer is not available as a feature source")
        layers = tuple(self.layer(m) for m in range(self.n_layers))
        return MultiplexGraph(self.graph.node_labels, layers, self.graph.layer_names)


def feature_graph_for_split(graph: MultiplexGraph, split: SplitBundle, include_target: bool) -> FeatureGraph:
    """Guarded feature view for one split.

    Val/test positives of the target layer are the protected edges; with
    ``include_target`` the target layer contributes its training positives.
    """
    protected = [e.pair for e in split.val + split.test if e.label == 1]
    allowed = split.train_positive_edges() if include_target else None
    return FeatureGraph(graph, split.target_layer, allowed, protected)
