"""Command-line pipeline: prepare -> embed -> train -> evaluate -> report.

Every stage reads and writes files under one run directory (``--out``),
so stages can be rerun or inspected independently.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .embed import Node2VecConfig, edge_view_array, embed_layer, load_embeddings, save_embeddings
from .experiment import DEFAULT_SEEDS, MetricsReport, ModelOptions, make_split
from .graph import (
    INDUCTIVE,
    TRANSDUCTIVE,
    SplitBundle,
    build_union_pool,
    feature_graph_for_split,
    format_edgelist,
    load_multiplex,
    parse_multiplex_edgelist,
)
from .models import TRANS_GAT, TRANS_SLE, ModelSpec, TransGAT, TransSLE
from .train import TrainConfig, evaluate_scores, predict_scores, select_threshold, train_model

log = logging.getLogger("mplexattn.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ConflictError(ValueError):
    """Runs that cannot be aggregated together."""


@dataclass
class RunConfig:
    dataset: str = ""
    format: str | None = None
    model: str = TRANS_SLE
    protocol: str = TRANSDUCTIVE
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    targets: list | None = None
    holdout_fraction: float = 0.15
    node2vec: Node2VecConfig = field(default_factory=Node2VecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    options: ModelOptions = field(default_factory=ModelOptions)
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node2vec"].pop("seed")
        d["train"].pop("seed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["node2vec"] = Node2VecConfig(**d.get("node2vec", {}))
            d["train"] = TrainConfig(**d.get("train", {}))
            d["options"] = ModelOptions(**d.get("options", {}))
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None

    def validate(self) -> None:
        if self.model not in (TRANS_SLE, TRANS_GAT):
            raise UsageError(f"unknown model {self.model!r}")
        if self.protocol not in (TRANSDUCTIVE, INDUCTIVE):
            raise UsageError(f"unknown protocol {self.protocol!r}")
        if self.model == TRANS_SLE:
            defaults = ModelOptions()
            gat_only = ("self_loops", "gat_depth", "nonlinearity", "cls_mode", "gat_from_node2vec", "gat_d_node")
            changed = [k for k in gat_only if getattr(self.options, k) != getattr(defaults, k)]
            if changed:
                raise UsageError(f"GAT options {changed} do not apply to trans_sle")


# ---------------------------------------------------------------------------
# run directory helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _update_manifest(out: Path, stage: str) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"stages": []}
    if stage not in manifest["stages"]:
        manifest["stages"].append(stage)
    manifest["files"] = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                               if p.is_file() and p.name != "manifest.json" and p.parent.name != "logs")
    _dump(path, manifest)


def _read_prepared(out: Path) -> tuple:
    graph_path = out / "graph.edges"
    if not graph_path.exists():
        raise FileNotFoundError(f"{graph_path} missing; run `prepare` first")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graph = parse_multiplex_edgelist(graph_path.read_text(encoding="utf-8").splitlines())
    prepared = json.loads((out / "prepared.json").read_text())
    return graph, prepared


def _split_path(out: Path, protocol: str, target: int, seed: int) -> Path:
    return out / "splits" / f"{protocol}_t{target}_s{seed}.json"


def _load_split(out: Path, protocol: str, target: int, seed: int) -> SplitBundle:
    path = _split_path(out, protocol, target, seed)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; rerun `prepare` with this seed/protocol")
    return SplitBundle.from_dict(json.loads(path.read_text()))


def _jobs(cfg: RunConfig, n_layers: int) -> list[tuple[int, int]]:
    targets = range(n_layers) if cfg.targets is None else cfg.targets
    for t in targets:
        if not 0 <= t < n_layers:
            raise UsageError(f"target layer {t} out of range for {n_layers} layers")
    return [(t, s) for s in cfg.seeds for t in targets]


def _run_tag(model: str, target: int, seed: int) -> str:
    return f"{model}_t{target}_s{seed}"


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig, out: Path) -> dict:
    if not cfg.dataset:
        raise UsageError("prepare needs a dataset path")
    stats: dict = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graph = load_multiplex(cfg.dataset, cfg.format, stats=stats)
    summary = graph.summary()
    summary["total_edges"] = graph.total_edges
    _write(out / "graph.edges", format_edgelist(graph))
    pool = build_union_pool(graph)
    _write(out / "pool.tsv", "".join(f"{u}\t{v}\n" for u, v in pool.pairs))
    for t, seed in _jobs(cfg, graph.n_layers):
        split = make_split(graph, t, cfg.protocol, seed, cfg.holdout_fraction)
        _dump(_split_path(out, cfg.protocol, t, seed), split.to_dict())
    _dump(out / "prepared.json", {"summary": summary, "dropped": stats, "dataset": str(cfg.dataset)})
    print(json.dumps(summary, sort_keys=True))
    return summary


def _embedding_path(out: Path, protocol: str, target: int, seed: int) -> Path:
    return out / "embeddings" / f"{protocol}_t{target}_s{seed}.n2v"


def cmd_embed(cfg: RunConfig, out: Path) -> None:
    graph, _ = _read_prepared(out)
    cache: dict = {}
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    for t, seed in _jobs(cfg, graph.n_layers):
        split = _load_split(out, cfg.protocol, t, seed)
        n2v = Node2VecConfig(**{**cfg.node2vec.to_dict(), "seed": seed})
        features = feature_graph_for_split(graph, split, include_target=True)
        tables = []
        for m in range(graph.n_layers):
            layer = features.layer(m)
            key = (seed, m, layer.edges)
            if key not in cache:
                cache[key] = embed_layer(layer, n2v, m)[0]
            tables.append(cache[key])
        save_embeddings(_embedding_path(out, cfg.protocol, t, seed), np.stack(tables), n2v,
                        {"target_layer": t, "protocol": cfg.protocol,
                         "target_view": "training edges only", "protected_reads": features.protected_reads})
        log.info("embedded target %d seed %d", t, seed)


def _build_inputs(cfg: RunConfig, out: Path, graph, split: SplitBundle, seed: int):
    """Network plus train/val/test inputs for one (target, seed)."""
    t = split.target_layer
    X = {name: split.arrays(name)[0] for name in ("train", "val", "test")}
    y = {name: split.arrays(name)[1] for name in ("train", "val", "test")}
    tcfg = cfg.train
    opts = cfg.options
    if cfg.model == TRANS_SLE:
        path = _embedding_path(out, cfg.protocol, t, seed)
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run `embed` first")
        tables, sidecar = load_embeddings(path)
        expected = Node2VecConfig(**{**cfg.node2vec.to_dict(), "seed": seed}).fingerprint()
        if sidecar.get("fingerprint") != expected:
            raise UsageError("embedding fingerprint does not match the Node2Vec config; rerun `embed`")
        if tables.shape[0] != graph.n_layers:
            raise UsageError("embedding layer count disagrees with the prepared graph")
        spec = ModelSpec(TRANS_SLE, graph.n_layers, tables.shape[2], use_layer_codes=opts.use_layer_codes,
                         feedforward=opts.feedforward, dropout=tcfg.dropout_rate)
        net = TransSLE(spec, seed=seed)
        inputs = {k: edge_view_array(v, tables) for k, v in X.items()}
        return net, inputs, y, None
    features = feature_graph_for_split(graph, split, include_target=False)
    init = None
    if opts.gat_from_node2vec:
        path = _embedding_path(out, cfg.protocol, t, seed)
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; gat_from_node2vec needs `embed` first")
        tables, _ = load_embeddings(path)
        if tables.shape[2] != opts.gat_d_node:
            raise UsageError("gat_d_node must equal the embedding dimension when gat_from_node2vec is set")
        init = np.mean([tables[m] for m in range(graph.n_layers) if m != t], axis=0)
    spec = ModelSpec(TRANS_GAT, graph.n_layers, opts.gat_d_node, target_layer=t,
                     use_layer_codes=opts.use_layer_codes, feedforward=opts.feedforward,
                     dropout=tcfg.dropout_rate, node_count=graph.node_count, self_loops=opts.self_loops,
                     gat_depth=opts.gat_depth, nonlinearity=opts.nonlinearity, cls_mode=opts.cls_mode)
    net = TransGAT(spec, features, seed=seed, init_features=init)
    return net, X, y, features


def _train_one(args) -> dict:
    cfg, out, target, seed = args
    graph, _ = _read_prepared(out)
    split = _load_split(out, cfg.protocol, target, seed)
    net, inputs, y, _ = _build_inputs(cfg, out, graph, split, seed)
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
    epoch_log = train_model(net, inputs["train"], y["train"], inputs["val"], y["val"], tcfg)
    # checkpoints hold float32; pick the threshold on the weights `evaluate` will load
    net.load_state_dict({k: v.astype(np.float32) for k, v in net.state_dict().items()})
    threshold = select_threshold(predict_scores(net, inputs["val"]), y["val"])
    tag = _run_tag(cfg.model, target, seed)
    ckpt_cfg = {"run": cfg.to_dict(), "spec": net.spec.to_dict(), "target_layer": target, "seed": seed,
                "threshold": threshold, "best_epoch": epoch_log.best_epoch, "epochs_run": epoch_log.epochs_run}
    ag.save_checkpoint(out / "checkpoints" / f"{tag}.ckpt", net.parameters(), ckpt_cfg)
    _write(out / "epochs" / f"{tag}.csv", epoch_log.to_csv())
    return {"tag": tag, "epochs_run": epoch_log.epochs_run, "threshold": threshold}


def cmd_train(cfg: RunConfig, out: Path) -> list[dict]:
    graph, _ = _read_prepared(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, out, t, s) for t, s in _jobs(cfg, graph.n_layers)]
    if cfg.model == TRANS_SLE or cfg.options.gat_from_node2vec:
        for _, _, t, s in jobs:
            if not _embedding_path(out, cfg.protocol, t, s).exists():
                raise FileNotFoundError(f"embeddings for target {t}, seed {s} missing; run `embed` first")
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    for r in results:
        log.info("trained %s in %d epochs", r["tag"], r["epochs_run"])
    return results


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[dict]:
    graph, prepared = _read_prepared(out)
    records = []
    for t, seed in _jobs(cfg, graph.n_layers):
        tag = _run_tag(cfg.model, t, seed)
        ckpt = out / "checkpoints" / f"{tag}.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"{ckpt} missing; run `train` first")
        manifest = json.loads(ckpt.with_suffix(".ckpt.json").read_text())
        trained = RunConfig.from_dict(manifest["config"]["run"])
        split = _load_split(out, cfg.protocol, t, seed)
        net, inputs, y, _ = _build_inputs(trained, out, graph, split, seed)
        net.load_state_dict(ag.load_checkpoint(ckpt))
        threshold = manifest["config"]["threshold"]
        scores = predict_scores(net, inputs["test"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            metrics = evaluate_scores(scores, y["test"], threshold)
        record = {"target_layer": t, "seed": seed, "macro_f1": metrics["macro_f1"], "roc_auc": metrics["roc_auc"],
                  "threshold": threshold, "epochs_run": manifest["config"]["epochs_run"]}
        result = {"record": record, "dataset": prepared["dataset"], "model": cfg.model, "protocol": cfg.protocol,
                  "config": trained.to_dict()}
        _dump(out / "results" / f"{tag}.json", result)
        records.append(record)
    return records


def _dataset_name(path: str) -> str:
    return Path(path).stem if path else "dataset"


def _comparable(config: dict) -> dict:
    """Config minus the keys that only select which runs were executed."""
    return {k: v for k, v in config.items() if k not in ("seeds", "targets", "workers")}


def cmd_report(cfg: RunConfig, out: Path) -> list[MetricsReport]:
    results_dir = out / "results"
    files = sorted(results_dir.glob("*.json")) if results_dir.exists() else []
    if not files:
        raise FileNotFoundError(f"no evaluated runs under {results_dir}")
    groups: dict[tuple, list[dict]] = {}
    for f in files:
        r = json.loads(f.read_text())
        groups.setdefault((r["dataset"], r["model"], r["protocol"]), []).append(r)
    reports = []
    for (dataset, model, protocol), runs in sorted(groups.items()):
        prints = {ag.fingerprint(_comparable(r["config"])) for r in runs}
        if len(prints) > 1:
            raise ConflictError(f"runs for {model}/{protocol} have {len(prints)} different config fingerprints; "
                                "refusing to aggregate")
        records = sorted((r["record"] for r in runs), key=lambda r: (r["seed"], r["target_layer"]))
        report = MetricsReport(_dataset_name(dataset), model, protocol, records, _comparable(runs[0]["config"]))
        stem = f"{model}_{protocol}"
        _write(out / "reports" / f"{stem}.json", report.to_json() + "\n")
        _write(out / "reports" / f"{stem}.csv", report.to_csv())
        reports.append(report)
    table = render_table(reports)
    _write(out / "reports" / "table.txt", table)
    print(table, end="")
    return reports


def render_table(reports: list[MetricsReport]) -> str:
    """Plain-text table: one row per dataset/protocol, F1 block then ROC-AUC block."""
    models = sorted({r.model for r in reports})
    rows = sorted({(r.dataset, r.protocol) for r in reports})
    by_key = {(r.dataset, r.protocol, r.model): r.aggregates() for r in reports}

    def cell(v):
        return "   -  " if v is None else f"{v:6.3f}"

    head = f"{'dataset':<24} | " + " ".join(f"{m:>10}" for m in models) + " | " + " ".join(f"{m:>10}" for m in models)
    lines = [f"{'':<24} | {'F1 (macro)':^{11 * len(models) - 1}} | {'ROC-AUC':^{11 * len(models) - 1}}", head,
             "-" * len(head)]
    for dataset, protocol in rows:
        f1 = [by_key.get((dataset, protocol, m), {}).get("macro_f1") for m in models]
        auc = [by_key.get((dataset, protocol, m), {}).get("roc_auc") for m in models]
        name = f"{dataset} ({'ind' if protocol == INDUCTIVE else 'tr'})"
        lines.append(f"{name:<24} | " + " ".join(f"{cell(v):>10}" for v in f1) + " | "
                     + " ".join(f"{cell(v):>10}" for v in auc))
    return "\n".join(lines) + "\n"


COMMANDS = {
    "prepare": cmd_prepare,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mplexattn", description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    parser.add_argument("--config", help="JSON run configuration; flags override it")
    parser.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="seed to run (repeatable; default 42, 18, 45)")
    parser.add_argument("--workers", type=int, help="parallel (layer, seed) jobs for train")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", choices=[TRANS_SLE, TRANS_GAT])
        p.add_argument("--protocol", choices=[TRANSDUCTIVE, INDUCTIVE])
        p.add_argument("--target", type=int, action="append", dest="targets", help="target layer (repeatable)")

    p = sub.add_parser("prepare", help="parse a dataset, build the candidate pool and splits")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--format", choices=["layer_first", "mpx"])
    p.add_argument("--holdout-fraction", type=float)
    common(p)

    p = sub.add_parser("embed", help="train per-layer Node2Vec tables for every split")
    common(p)
    for name, typ in (("d-node", int), ("p", float), ("q", float), ("walk-length", int),
                      ("walks-per-node", int), ("window", int), ("epochs", int)):
        p.add_argument(f"--{name}", type=typ, dest=f"n2v_{name.replace('-', '_')}")

    p = sub.add_parser("train", help="train one model per (target layer, seed)")
    common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-layer-codes", action="store_true")
    p.add_argument("--no-feedforward", action="store_true")
    p.add_argument("--no-self-loops", action="store_true")
    p.add_argument("--gat-from-node2vec", action="store_true")
    p.add_argument("--cls-mode", choices=["replace", "append"])

    p = sub.add_parser("evaluate", help="score test splits with the trained checkpoints")
    common(p)

    sub.add_parser("report", help="aggregate evaluated runs into reports and a text table")
    return parser


def resolve_config(args: argparse.Namespace, out: Path) -> RunConfig:
    """Start from --config, else the run directory's saved config, then apply flags."""
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    elif (out / "config.json").exists():
        base = json.loads((out / "config.json").read_text())
    else:
        base = {}
    cfg = RunConfig.from_dict(base)
    d = cfg.to_dict()
    v = vars(args)
    for key in ("dataset", "format", "model", "protocol", "targets", "holdout_fraction", "seeds", "workers"):
        if v.get(key) is not None:
            d[key] = v[key]
    for key, value in v.items():
        if key.startswith("n2v_") and value is not None:
            d["node2vec"][key[4:]] = value
    for key in ("lr", "max_epochs", "patience", "batch_size"):
        if v.get(key) is not None:
            d["train"][key] = v[key]
    opts = d["options"]
    if v.get("no_layer_codes"):
        opts["use_layer_codes"] = False
    if v.get("no_feedforward"):
        opts["feedforward"] = False
    if v.get("no_self_loops"):
        opts["self_loops"] = False
    if v.get("gat_from_node2vec"):
        opts["gat_from_node2vec"] = True
    if v.get("cls_mode"):
        opts["cls_mode"] = v["cls_mode"]
    cfg = RunConfig.from_dict(d)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    out = Path(args.out)
    console = logging.StreamHandler()
    console.setLevel(logging.DEBUG if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    try:
        cfg = resolve_config(args, out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
        handler = logging.FileHandler(out / "logs" / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.addHandler(console)
        log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        try:
            COMMANDS[args.command](cfg, out)
        finally:
            log.removeHandler(handler)
            log.removeHandler(console)
            handler.close()
        _dump(out / "config.json", cfg.to_dict())
        _dump(out / f"config.{args.command}.json", cfg.to_dict())
        _update_manifest(out, args.command)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, UnicodeDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ag.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
