"""Per-(target layer, seed) runs and layer/seed averaged reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import fingerprint
from .embed import Node2VecConfig, edge_view_array, embed_layer
from .estimators import TransGATClassifier, TransSLEClassifier
from .graph import (
    INDUCTIVE,
    TRANSDUCTIVE,
    FeatureGraph,
    MultiplexGraph,
    SplitBundle,
    build_union_pool,
    feature_graph_for_split,
    inductive_node_split,
    label_for_target,
    stratified_split,
)
from .models import TRANS_GAT, TRANS_SLE
from .train import TrainConfig, baseline_common_neighbors, evaluate_scores, select_threshold

log = logging.getLogger(__name__)

BASELINE = "common_neighbors"
DEFAULT_SEEDS = (42, 18, 45)


@dataclass(frozen=True)
class ModelOptions:
    use_layer_codes: bool = True
    feedforward: bool = True
    self_loops: bool = True
    gat_depth: int = 1
    nonlinearity: str = "elu"
    cls_mode: str = "replace"
    gat_from_node2vec: bool = False
    gat_d_node: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


class LabelVault:
    """Holds test labels and logs every access with the stage that asked."""

    def __init__(self, labels: np.ndarray):
        self._labels = labels
        self.accesses: list[str] = []

    def reveal(self, stage: str) -> np.ndarray:
        self.accesses.append(stage)
        return self._labels


def make_split(graph: MultiplexGraph, target: int, protocol: str, seed: int,
               holdout_fraction: float = 0.15) -> SplitBundle:
    pool = build_union_pool(graph)
    if protocol == TRANSDUCTIVE:
        return stratified_split(label_for_target(pool, graph, target), (0.70, 0.15, 0.15), seed)
    if protocol == INDUCTIVE:
        return inductive_node_split(graph, pool, target, holdout_fraction, seed)
    raise ValueError(f"unknown protocol {protocol!r}")


class EmbeddingCache:
    """Node2Vec tables per (layer, edge set); auxiliary layers are shared across targets."""

    def __init__(self, config: Node2VecConfig):
        self.config = config
        self._tables: dict = {}

    def tables(self, features: FeatureGraph) -> np.ndarray:
        out = []
        for m in range(features.n_layers):
            layer = features.layer(m)
            key = (m, layer.edges)
            if key not in self._tables:
                self._tables[key] = embed_layer(layer, self.config, m)[0]
            out.append(self._tables[key])
        return np.stack(out)


@dataclass
class RunResult:
    target_layer: int
    seed: int
    macro_f1: float
    roc_auc: float | None
    threshold: float
    epochs_run: int
    protected_reads: int = 0
    test_label_accesses: list = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None


def run_single(graph: MultiplexGraph, kind: str, target: int, seed: int, protocol: str = TRANSDUCTIVE,
               n2v: Node2VecConfig | None = None, train: TrainConfig | None = None,
               options: ModelOptions | None = None, cache: EmbeddingCache | None = None,
               holdout_fraction: float = 0.15, return_model: bool = False):
    """Train and evaluate one model for one target layer and seed."""
    started = time.perf_counter()
    train = train or TrainConfig()
    options = options or ModelOptions()
    split = make_split(graph, target, protocol, seed, holdout_fraction)
    X_tr, y_tr = split.arrays("train")
    X_va, y_va = split.arrays("val")
    X_te, y_te_raw = split.arrays("test")
    vault = LabelVault(y_te_raw)
    del y_te_raw
    features = feature_graph_for_split(graph, split, include_target=(kind == TRANS_SLE))
    model = None

    if kind == BASELINE:
        pool = np.concatenate([X_tr, X_va, X_te])
        scores = baseline_common_neighbors(pool, features, target)
        s_va = scores[len(X_tr):len(X_tr) + len(X_va)]
        s_te = scores[len(X_tr) + len(X_va):]
        threshold = select_threshold(s_va, y_va)
        epochs = 0
    else:
        n2v = n2v or Node2VecConfig(seed=seed)
        common = dict(dropout=train.dropout_rate, lr=train.lr, batch_size=train.batch_size,
                      max_epochs=train.max_epochs, patience=train.patience, clip_norm=train.clip_norm,
                      random_state=seed, use_layer_codes=options.use_layer_codes,
                      feedforward=options.feedforward)
        if kind == TRANS_SLE:
            tables = (cache or EmbeddingCache(n2v)).tables(features)
            model = TransSLEClassifier(**common)
            model.fit(edge_view_array(X_tr, tables), y_tr, eval_set=(edge_view_array(X_va, tables), y_va))
            X_eval = edge_view_array(X_te, tables)
        elif kind == TRANS_GAT:
            init = None
            if options.gat_from_node2vec:
                guarded = FeatureGraph(graph, target, None)
                aux = [m for m in range(graph.n_layers) if m != target]
                cfg = Node2VecConfig(**{**n2v.to_dict(), "d_node": options.gat_d_node})
                init = np.mean([embed_layer(guarded.layer(m), cfg, m)[0] for m in aux], axis=0)
            model = TransGATClassifier(features=features, d_node=options.gat_d_node, self_loops=options.self_loops,
                                       gat_depth=options.gat_depth, nonlinearity=options.nonlinearity,
                                       cls_mode=options.cls_mode, init_features=init, **common)
            model.fit(X_tr, y_tr, eval_set=(X_va, y_va))
            X_eval = X_te
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        threshold = model.threshold_
        epochs = model.n_epochs_
        s_te = model.predict_proba(X_eval)[:, 1]

    metrics = evaluate_scores(s_te, vault.reveal("evaluate"), threshold)
    result = RunResult(target, seed, metrics["macro_f1"], metrics["roc_auc"], float(threshold), epochs,
                       features.protected_reads, list(vault.accesses), time.perf_counter() - started)
    if return_model:
        return result, model, split
    return result


# ---------------------------------------------------------------------------
# report


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    dataset: str
    model: str
    protocol: str
    records: list[dict]
    config: dict
    complete: bool = True
    failures: list[dict] = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def aggregates(self) -> dict:
        """Layer-wise mean per seed, then the mean over seeds."""
        per_seed = {}
        for seed in sorted({r["seed"] for r in self.records}):
            rows = [r for r in self.records if r["seed"] == seed]
            per_seed[str(seed)] = {"macro_f1": _mean(r["macro_f1"] for r in rows),
                                   "roc_auc": _mean(r["roc_auc"] for r in rows)}
        return {
            "per_seed": per_seed,
            "macro_f1": _mean(v["macro_f1"] for v in per_seed.values()),
            "roc_auc": _mean(v["roc_auc"] for v in per_seed.values()),
        }

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "protocol": self.protocol,
            "records": self.records,
            "aggregates": self.aggregates(),
            "config": self.config,
            "fingerprint": self.fingerprint,
            "complete": self.complete,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        report = cls(d["dataset"], d["model"], d["protocol"], d["records"], d["config"],
                     d.get("complete", True), d.get("failures", []))
        if d.get("fingerprint") not in (None, report.fingerprint):
            raise ValueError("report fingerprint does not match its config")
        stored = d.get("aggregates")
        if stored is not None and not _close(stored, report.aggregates()):
            raise ValueError("stored aggregates are not recomputable from the records")
        return report

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["dataset", "model", "protocol", "target_layer", "seed", "macro_f1", "roc_auc", "threshold",
                "epochs_run"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.records:
            w.writerow({"dataset": self.dataset, "model": self.model, "protocol": self.protocol, **r})
        return buf.getvalue()


def _close(a, b, tol: float = 1e-12) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if a is None or b is None:
        return a is b
    return abs(float(a) - float(b)) <= tol


def _record(r: RunResult) -> dict:
    return {"target_layer": r.target_layer, "seed": r.seed, "macro_f1": r.macro_f1, "roc_auc": r.roc_auc,
            "threshold": r.threshold, "epochs_run": r.epochs_run}


def _run_job(args):
    graph, kind, target, seed, protocol, n2v, train, options, holdout = args
    try:
        return run_single(graph, kind, target, seed, protocol, n2v, train, options, None, holdout)
    except Exception as exc:  # isolate per-run failures
        log.exception("run failed (layer %d, seed %d)", target, seed)
        return RunResult(target, seed, float("nan"), None, float("nan"), 0, error=f"{type(exc).__name__}: {exc}")


def run_experiment(graph: MultiplexGraph, kind: str, protocol: str = TRANSDUCTIVE, seeds=DEFAULT_SEEDS,
                   targets=None, n2v: Node2VecConfig | None = None, train: TrainConfig | None = None,
                   options: ModelOptions | None = None, dataset: str = "", workers: int = 1,
                   holdout_fraction: float = 0.15, results: list | None = None) -> MetricsReport:
    """One model per (target layer, seed), aggregated into a :class:`MetricsReport`.

    Failed runs are listed under ``failures`` and mark the report
    incomplete.  Pass a list as ``results`` to receive the raw
    :class:`RunResult` objects.
    """
    targets = list(range(graph.n_layers)) if targets is None else list(targets)
    train = train or TrainConfig()
    options = options or ModelOptions()
    base_n2v = n2v or Node2VecConfig()
    jobs = []
    for seed in seeds:
        cfg = Node2VecConfig(**{**base_n2v.to_dict(), "seed": seed})
        tcfg = TrainConfig(**{**train.to_dict(), "seed": seed})
        for t in targets:
            jobs.append((graph, kind, t, seed, protocol, cfg, tcfg, options, holdout_fraction))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_job, jobs))
    else:
        caches: dict[int, EmbeddingCache] = {}
        out = []
        for job in jobs:
            graph_, kind_, t, seed, protocol_, cfg, tcfg, opts, holdout = job
            cache = caches.setdefault(seed, EmbeddingCache(cfg))
            try:
                out.append(run_single(graph_, kind_, t, seed, protocol_, cfg, tcfg, opts, cache, holdout))
            except Exception as exc:  # isolate per-run failures
                log.exception("run failed (layer %d, seed %d)", t, seed)
                out.append(RunResult(t, seed, float("nan"), None, float("nan"), 0,
                                     error=f"{type(exc).__name__}: {exc}"))
    if results is not None:
        results.extend(out)
    config = {
        "model": kind, "protocol": protocol, "seeds": list(seeds), "targets": targets,
        "node2vec": {k: v for k, v in base_n2v.to_dict().items() if k != "seed"},
        "train": {k: v for k, v in train.to_dict().items() if k != "seed"},
        "options": options.to_dict(), "holdout_fraction": holdout_fraction,
    }
    ok = [r for r in out if r.error is None]
    failures = [{"target_layer": r.target_layer, "seed": r.seed, "error": r.error} for r in out if r.error]
    return MetricsReport(dataset, kind, protocol, [_record(r) for r in ok], config, not failures, failures)
