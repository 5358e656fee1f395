"""``graph-unlearn`` command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 training diverged,
3 incompatible model/strategy, 4 empty remaining set, 5 I/O or file format.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .config import ExperimentConfig, load_config
from .errors import ConfigError, FormatError, UnlearnError
from .evaluation import (
    MlpConfig,
    bound_experiment,
    closeness_experiment,
    delta_report,
    dumps,
    feature_injection_experiment,
    format_mapping,
    format_table,
    mlp_feature_mode,
    robustness_sweep,
    write_csv,
)
from .features import add_span_noise, gram_precompute, load_gram, read_features, read_labels, save_gram, span_residual, write_features, write_labels
from .graph import CsbmParams, generate_csbm, read_edge_list, write_edge_list
from .linear_model import TrainConfig, labels_for, load_model, pegasos_train, save_model, train
from .task import GraphTask, random_split
from .unlearn import UnlearnRequest, run_strategy

logger = logging.getLogger(__name__)

COMMANDS = ("generate", "train", "unlearn", "eval", "inject", "sweep", "delta", "bound")
SWEEP_COLUMNS = [
    "ratio", "seed", "strategy", "deleted", "test_accuracy", "weight_diff",
    "normalized_weight_diff", "unlearn_seconds", "retrain_seconds",
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_set(items: list[str]) -> dict:
    """``a.b.c=value`` pairs into a nested dict; values are parsed as JSON when possible."""
    out: dict = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set {item!r}: expected key.path=value")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parsed
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graph-unlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field, e.g. model.lambda=1e-4")
        if name == "unlearn":
            p.add_argument("--model", required=True, help="trained model file")
            p.add_argument("--precompute-gram", dest="precompute_gram",
                           help="Gram cache file; created if missing, then downdated per request")
        if name == "sweep":
            p.add_argument("--csv", help="also write the long-form table as CSV")
    return parser


# -- dataset --------------------------------------------------------------


@dataclass
class Prepared:
    task: GraphTask
    deleted: np.ndarray
    meta: dict


def _csbm_params(cfg: ExperimentConfig) -> CsbmParams:
    c = cfg.csbm
    return CsbmParams.symmetric(c["n"], c["p"], c["q"], c["dim"], c["separation"], c["noise_scale"], cfg.seed_for("graph"))


def load_dataset(cfg: ExperimentConfig):
    if cfg.source == "csbm":
        return generate_csbm(_csbm_params(cfg))
    labels = read_labels(cfg.files["labels"])
    X = read_features(cfg.files["features"])
    graph = read_edge_list(cfg.files["edges"], num_nodes=labels.size)
    if X.shape[0] != labels.size or graph.num_nodes != labels.size:
        raise FormatError(f"row counts differ: {graph.num_nodes} nodes, {X.shape[0]} feature rows, {labels.size} labels")
    return graph, X, labels


def prepare(cfg: ExperimentConfig, loss_kind: str | None = None) -> Prepared:
    graph, X, labels = load_dataset(cfg)
    if cfg.feature_noise > 0:
        X = add_span_noise(X, cfg.feature_noise, cfg.seed_for("feature_noise"))
    n = graph.num_nodes
    train_nodes, test_nodes = random_split(n, cfg.train_fraction, cfg.seed_for("split"))
    deleted = cfg.delete.select(graph.degrees, train_nodes, cfg.seed_for("delete"))
    if deleted.size and deleted[-1] >= n:
        raise ConfigError(f"unlearn.delete.explicit_ids: index {deleted[-1]} out of range [0, {n})")
    meta: dict = {}
    if cfg.mlp is not None:
        try:
            mcfg = MlpConfig(**{**cfg.mlp, "seed": cfg.seed_for("mlp")})
        except TypeError as exc:
            raise ConfigError(f"mlp: {exc}") from None
        X, meta["mlp"] = mlp_feature_mode(X, labels, np.setdiff1d(train_nodes, deleted), mcfg, deleted)
    y = labels_for(loss_kind or cfg.loss_kind, labels)
    task = GraphTask(graph, X, y, train_nodes, test_nodes, cfg.mode, cfg.hops, cfg.self_loops, cfg.multi_hop)
    return Prepared(task, deleted, meta)


def train_config(cfg: ExperimentConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(cfg.lam, cfg.eta, cfg.epochs, cfg.batch_size, cfg.seed_for("train") if seed is None else seed)


def fit(cfg: ExperimentConfig, task: GraphTask):
    if cfg.loss_kind == "hinge":
        return pegasos_train(task.H, task.labels, task.train_nodes, train_config(cfg)), None
    return train(task.H, task.labels, task.train_nodes, cfg.loss_kind, train_config(cfg))


# -- commands -------------------------------------------------------------


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


def cmd_generate(cfg: ExperimentConfig, args, out: Path) -> int:
    if cfg.source != "csbm":
        raise ConfigError("dataset.csbm: generate needs CSBM parameters")
    params = _csbm_params(cfg)
    graph, X, labels = generate_csbm(params)
    write_edge_list(out / "edges.tsv", graph)
    write_features(out / "features.csv", X)
    write_labels(out / "labels.txt", labels)
    ncomp, _ = connected_components(graph.adjacency, directed=False)
    manifest = {
        "csbm": cfg.csbm, "seed": cfg.seed, "graph_seed": params.seed,
        "num_nodes": graph.num_nodes, "num_edges": graph.num_edges, "components": int(ncomp),
        "files": {"edges": "edges.tsv", "features": "features.csv", "labels": "labels.txt"},
    }
    _write(out, "manifest.json", dumps(manifest))
    print(format_mapping({k: v for k, v in manifest.items() if k != "files"}), end="")
    return 0


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> int:
    prep = prepare(cfg)
    task = prep.task
    model, trace = fit(cfg, task)
    save_model(out / "model.bin", model)
    H_train = task.H[task.train_nodes]
    residuals = [span_residual(row, H_train) for row in model.W] if task.train_nodes.size else []
    info = {
        "loss_kind": model.loss_kind,
        "final_objective": trace.objective[-1] if trace else None,
        "objective": trace.objective if trace else [],
        "grad_norm": trace.grad_norm if trace else [],
        "wall_clock": trace.wall_clock if trace else None,
        "span_residual": max(residuals, default=0.0),
        "weight_norm": float(np.linalg.norm(model.W)),
        "eta": model.provenance.eta,
        **prep.meta,
    }
    _write(out, "trace.json", dumps(info))
    print(format_mapping({k: v for k, v in info.items() if k not in ("objective", "grad_norm", "mlp")}), end="")
    return 0


def cmd_unlearn(cfg: ExperimentConfig, args, out: Path) -> int:
    model = load_model(args.model)
    prep = prepare(cfg, model.loss_kind)
    gram = None
    if args.precompute_gram:
        path = Path(args.precompute_gram)
        if path.exists():
            gram = load_gram(path)
        else:
            gram = gram_precompute(prep.task.features, ridge_eps=cfg.ridge_eps, with_inverse=True)
            save_gram(path, gram)
    req = UnlearnRequest(
        prep.deleted, cfg.strategy, cfg.noise_std, cfg.finetune_K, None, cfg.ridge_eps,
        cfg.seed_for("noise"), cfg.corrected,
    )
    res = run_strategy(model, prep.task, req, gram)
    save_model(out / "unlearned.bin", res.model)
    doc = res.to_json("unlearned.bin")
    doc["deleted_count"] = int(prep.deleted.size)
    _write(out, "unlearn.json", dumps(doc))
    print(format_mapping({"strategy": res.strategy, "deleted": int(prep.deleted.size), **res.diagnostics}), end="")
    return 0


def cmd_eval(cfg: ExperimentConfig, args, out: Path) -> int:
    prep = prepare(cfg)
    model, _ = fit(cfg, prep.task)
    res = closeness_experiment(model, prep.task, prep.deleted, cfg.strategies, cfg.noise_std,
                               cfg.seed_for("noise"), cfg.finetune_K)
    res["deleted_count"] = int(prep.deleted.size)
    _write(out, "eval.json", dumps(res))
    rows = [{"strategy": s, **{k: v for k, v in e.items() if not isinstance(v, (dict, list))},
             **{f"act_{k}": v for k, v in e["activation_distance"].items()}}
            for s, e in res["strategies"].items()]
    text = format_table(rows)
    _write(out, "eval.txt", text)
    print(text, end="")
    return 0


def cmd_inject(cfg: ExperimentConfig, args, out: Path) -> int:
    prep = prepare(cfg, "logistic" if cfg.injection_mode == "binary" else "softmax")
    rep = feature_injection_experiment(
        prep.task, cfg.delete_fraction, cfg.strategies, cfg.seed_for("delete"), train_config(cfg),
        cfg.injection_loss, cfg.injection_mode, cfg.noise_std,
    )
    doc = rep.to_dict()
    _write(out, "inject.json", dumps(doc))
    rows = [{"strategy": s, "injected_norm_after": rep.injected_norm_after[s],
             "accuracy_after": rep.accuracy_after[s], "unlearn_seconds": rep.unlearn_seconds[s]}
            for s in rep.injected_norm_after]
    text = format_mapping({"deleted": rep.deleted_count, "injected_norm_before": rep.injected_norm_before,
                           "accuracy_before": rep.accuracy_before, "retrain_seconds": rep.retrain_seconds})
    text += format_table(rows)
    _write(out, "inject.txt", text)
    print(text, end="")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args, out: Path) -> int:
    if cfg.loss_kind == "hinge":
        raise ConfigError("model.loss_kind: sweep needs a gradient-trained loss")
    prep = prepare(cfg)
    rows = robustness_sweep(prep.task, cfg.ratios, cfg.strategies, cfg.seeds, cfg.loss_kind,
                            train_config(cfg), jobs=max(1, args.jobs))
    _write(out, "sweep.json", dumps(rows))
    text = format_table(rows, SWEEP_COLUMNS)
    _write(out, "sweep.txt", text)
    if args.csv:
        write_csv(args.csv, rows, SWEEP_COLUMNS)
    print(text, end="")
    return 0


def cmd_delta(cfg: ExperimentConfig, args, out: Path) -> int:
    prep = prepare(cfg)
    rep = delta_report(prep.task.features, prep.deleted, cfg.ridge_eps)
    _write(out, "delta.json", dumps(rep))
    print(format_mapping(rep), end="")
    return 0


def cmd_bound(cfg: ExperimentConfig, args, out: Path) -> int:
    prep = prepare(cfg)
    model, _ = fit(cfg, prep.task)
    rep = bound_experiment(model, prep.task, prep.deleted, cfg.sample_count, cfg.seed_for("constants"))
    _write(out, "bound.json", dumps(rep))
    p2 = rep.get("prop2")
    lines = {
        "Delta": rep["bound"], "observed": rep["observed"], "slack_ratio": rep["slack_ratio"],
        "bound_holds": rep["holds"],
        "prop2_threshold": p2["threshold"] if p2 else "n/a",
        "prop2_holds": p2["holds"] if p2 else "n/a",
        "delta": rep["constants"]["delta"],
    }
    print(format_mapping(lines), end="")
    return 0


HANDLERS = {
    "generate": cmd_generate, "train": cmd_train, "unlearn": cmd_unlearn, "eval": cmd_eval,
    "inject": cmd_inject, "sweep": cmd_sweep, "delta": cmd_delta, "bound": cmd_bound,
}


def _setup_logging() -> None:
    level = os.environ.get("UNLEARN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        logger.info("%s: seed %d, writing to %s", args.command, cfg.seed, out)
        return HANDLERS[args.command](cfg, args, out)
    except UnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
