"""Experiment harness: injection audit, closeness to retraining, ratio sweeps,
bound checks and the optional MLP feature extractor."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigError, TrainingDiverged
from .features import delta_measure
from .graph import node_set
from .linear_model import ModelWeights, TrainConfig, evaluate, labels_for, train
from .task import GraphTask
from .unlearn import (
    UnlearnRequest,
    estimate_constants,
    probe_norm,
    prop2_condition,
    retrain_baseline,
    run_strategy,
    theorem1_bound,
)

logger = logging.getLogger(__name__)

TIMING_KEYS = frozenset({"elapsed_seconds", "wall_clock", "unlearn_seconds", "retrain_seconds", "elapsed"})


def sample_deleted(train_nodes: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"delete fraction must be in (0, 1), got {fraction}")
    k = min(max(1, int(round(fraction * train_nodes.size))), train_nodes.size - 1)
    return np.sort(rng.choice(train_nodes, size=k, replace=False))


def _num_classes(model: ModelWeights) -> int | None:
    return None if model.loss_kind in ("logistic", "hinge") else model.W.shape[0]


def _post_accuracy(model: ModelWeights, task: GraphTask, deleted: np.ndarray) -> float:
    """Test accuracy on the graph that remains after the deletion."""
    reduced, _ = task.without(deleted)
    if reduced.test_nodes.size == 0:
        return float("nan")
    return evaluate(model, reduced.H, reduced.labels, reduced.test_nodes)["accuracy"]


# -- feature injection ----------------------------------------------------


@dataclass
class InjectionReport:
    deleted_count: int
    injected_norm_before: float
    accuracy_before: float
    injected_norm_after: dict = field(default_factory=dict)
    accuracy_after: dict = field(default_factory=dict)
    unlearn_seconds: dict = field(default_factory=dict)
    retrain_seconds: float = 0.0
    mode: str = "multiclass"

    def to_dict(self) -> dict:
        return asdict(self)


def inject_channel(task: GraphTask, deleted: np.ndarray, mode: str = "multiclass") -> GraphTask:
    """Append a 0/1 column that is 1 exactly on ``deleted`` and make it predictive.

    ``multiclass`` gives the deleted nodes a new class of their own;
    ``binary`` flips their +-1 labels.
    """
    n = task.num_nodes
    col = np.zeros((n, 1))
    col[deleted] = 1.0
    X = np.hstack([task.features, col])
    y = task.labels.copy()
    if mode == "multiclass":
        y = labels_for("softmax", y)
        y[deleted] = int(y.max()) + 1
    elif mode == "binary":
        y = labels_for("logistic", y)
        y[deleted] = -y[deleted]
    else:
        raise ConfigError(f"injection mode: unknown value {mode!r}")
    return GraphTask(task.graph, X, y, task.train_nodes, task.test_nodes, task.mode, task.hops,
                     task.self_loops, task.multi_hop)


def feature_injection_experiment(
    task: GraphTask,
    delete_fraction: float,
    strategies: tuple[str, ...],
    seed: int,
    config: TrainConfig,
    loss_kind: str | None = None,
    mode: str = "multiclass",
    noise_std: float = 0.0,
) -> InjectionReport:
    rng = np.random.default_rng(seed)
    deleted = sample_deleted(task.train_nodes, delete_fraction, rng)
    itask = inject_channel(task, deleted, mode)
    probe = task.features.shape[1]
    kind = loss_kind or ("ovr_logistic" if mode == "multiclass" else "logistic")
    model, _ = train(itask.H, itask.labels, itask.train_nodes, kind, config)
    report = InjectionReport(
        int(deleted.size), probe_norm(model.W, probe, probe + 1),
        evaluate(model, itask.H, itask.labels, itask.test_nodes)["accuracy"] if itask.test_nodes.size else float("nan"),
        mode=mode,
    )
    for s in strategies:
        req = UnlearnRequest(deleted, s, noise_std=noise_std, seed=seed, probe_column=probe)
        res = run_strategy(model, itask, req)
        report.injected_norm_after[s] = res.diagnostics["injected_channel_norm"]
        report.accuracy_after[s] = _post_accuracy(res.model, itask, deleted)
        report.unlearn_seconds[s] = res.elapsed
        if s == "retrain":
            report.retrain_seconds = res.elapsed
    if "retrain" not in strategies:
        C = _num_classes(model)
        report.retrain_seconds = retrain_baseline(itask, deleted, config, kind, C).elapsed
    return report


# -- closeness ------------------------------------------------------------


@dataclass
class ClosenessReport:
    normalized_weight_diff: float
    weight_diff: float
    activation_distance: dict = field(default_factory=dict)
    omitted_subsets: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def activations(W: np.ndarray, H: np.ndarray, loss_kind: str) -> np.ndarray:
    scores = H @ np.atleast_2d(W).T
    if loss_kind == "softmax":
        return softmax(scores, axis=1)
    return expit(scores)


def closeness_report(
    w: np.ndarray,
    w_p: np.ndarray,
    w_u: np.ndarray,
    H: np.ndarray,
    subsets: dict,
    loss_kind: str = "logistic",
) -> ClosenessReport:
    """``||w_u - w_p|| / ||w||`` and mean activation gap on each node subset."""
    w, w_p, w_u = (np.atleast_2d(np.asarray(a, float)) for a in (w, w_p, w_u))
    if not (w.shape == w_p.shape == w_u.shape) or w.shape[1] != H.shape[1]:
        raise ValueError("weight and feature dimensions do not match")
    diff = float(np.linalg.norm(w_u - w_p))
    nw = float(np.linalg.norm(w))
    rep = ClosenessReport(diff / nw if nw > 0 else (0.0 if diff == 0 else float("inf")), diff)
    for name, nodes in subsets.items():
        nodes = np.asarray(nodes, dtype=np.int64)
        if nodes.size == 0:
            rep.omitted_subsets.append(name)
            continue
        gap = activations(w_p, H[nodes], loss_kind) - activations(w_u, H[nodes], loss_kind)
        rep.activation_distance[name] = float(np.mean(np.linalg.norm(gap, axis=1)))
    return rep


def closeness_experiment(
    model: ModelWeights,
    task: GraphTask,
    deleted,
    strategies: tuple[str, ...],
    noise_std: float = 0.0,
    seed: int = 0,
    finetune_K: int = 0,
) -> dict:
    """Run each strategy and compare it with retraining from scratch.

    Activations use the pre-deletion features for every subset.
    """
    deleted = node_set(deleted, task.num_nodes)
    retrain = run_strategy(model, task, UnlearnRequest(deleted, "retrain"))
    subsets = {
        "deleted": deleted,
        "remaining": np.setdiff1d(task.train_nodes, deleted),
        "test": np.setdiff1d(task.test_nodes, deleted),
    }
    out = {"retrain_seconds": retrain.elapsed, "strategies": {}}
    for s in strategies:
        res = retrain if s == "retrain" else run_strategy(
            model, task, UnlearnRequest(deleted, s, noise_std=noise_std, seed=seed, finetune_K=finetune_K)
        )
        rep = closeness_report(model.W, res.model.W, retrain.model.W, task.H, subsets, model.loss_kind)
        entry = rep.to_dict()
        entry["unlearn_seconds"] = res.elapsed
        entry["test_accuracy"] = _post_accuracy(res.model, task, deleted)
        out["strategies"][s] = entry
    return out


# -- robustness sweep -----------------------------------------------------


def _cell_seed(ratio: float, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(round(ratio * 1_000_000))])


def _sweep_cell(args) -> list[dict]:
    task, ratio, seed, strategies, loss_kind, config = args
    cfg = TrainConfig(config.lam, config.eta, config.epochs, config.batch_size, seed)
    model, _ = train(task.H, task.labels, task.train_nodes, loss_kind, cfg)
    deleted = sample_deleted(task.train_nodes, ratio, _cell_seed(ratio, seed))
    res = closeness_experiment(model, task, deleted, strategies, seed=seed)
    rows = []
    for s in strategies:
        e = res["strategies"][s]
        rows.append({
            "ratio": ratio, "seed": seed, "strategy": s, "deleted": int(deleted.size),
            "test_accuracy": e["test_accuracy"], "weight_diff": e["weight_diff"],
            "normalized_weight_diff": e["normalized_weight_diff"],
            "unlearn_seconds": e["unlearn_seconds"], "retrain_seconds": res["retrain_seconds"],
        })
    return rows


def robustness_sweep(
    task: GraphTask,
    ratios,
    strategies,
    seeds,
    loss_kind: str,
    config: TrainConfig,
    jobs: int = 1,
) -> list[dict]:
    """One row per (ratio, seed, strategy), in that nesting order.

    Each (ratio, seed) cell trains its own model with ``seed`` and deletes a
    random set drawn from ``(ratio, seed)``, so cells are independent and
    may run in worker processes.
    """
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ConfigError(f"ratios: {r} is outside (0, 1)")
    cells = [(task, float(r), int(s), tuple(strategies), loss_kind, config) for r in ratios for s in seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_sweep_cell, cells))
    else:
        parts = [_sweep_cell(c) for c in cells]
    return [row for part in parts for row in part]


def median_by(rows: list[dict], key: str, value: str, strategy: str) -> dict:
    groups: dict = {}
    for r in rows:
        if r["strategy"] == strategy:
            groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}


# -- bound and delta ------------------------------------------------------


def bound_experiment(
    model: ModelWeights,
    task: GraphTask,
    deleted,
    sample_count: int = 8,
    seed: int = 0,
) -> dict:
    """Closeness bound versus the observed projector-to-retrain distance."""
    deleted = node_set(deleted, task.num_nodes)
    retrain = run_strategy(model, task, UnlearnRequest(deleted, "retrain"))
    proj = run_strategy(model, task, UnlearnRequest(deleted, "projector"))
    observed = float(np.linalg.norm(retrain.model.W - proj.model.W))
    consts = estimate_constants(task, deleted, model, sample_count, seed, extra_points=(retrain.model.W,))
    bound = theorem1_bound(consts)
    out = {
        "constants": consts.as_dict(),
        "bound": bound,
        "observed": observed,
        "slack_ratio": bound / observed if observed > 0 else float("inf"),
        "holds": bool(observed <= bound * (1 + 1e-12) + 1e-12),
    }
    if deleted.size and consts.lam > 0:
        out["prop2"] = prop2_condition(consts)
    return out


def delta_report(X: np.ndarray, deleted=None, ridge_eps: float | None = None) -> dict:
    out = {"leave_one_out_all": delta_measure(X, "leave_one_out_all", ridge_eps=ridge_eps)}
    if deleted is not None and len(deleted):
        out["against_set"] = delta_measure(X, "against_set", node_set(deleted, X.shape[0]), ridge_eps)
    out["mean_feature_norm"] = float(np.linalg.norm(X.mean(axis=0)))
    return out


# -- MLP feature extractor ------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    hidden: int = 32
    out_dim: int | None = None
    activation: str = "tanh"
    epochs: int = 50
    lr: float = 0.1
    batch_size: int = 64
    init: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ("tanh", "linear"):
            raise ConfigError(f"mlp.activation: unknown value {self.activation!r}")
        if self.init not in ("random", "identity"):
            raise ConfigError(f"mlp.init: unknown value {self.init!r}")
        if self.hidden < 1 or self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("mlp: hidden, batch_size must be >= 1, epochs >= 0, lr > 0")


@dataclass
class Mlp:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str

    def hidden(self, X: np.ndarray) -> np.ndarray:
        A = X @ self.W1 + self.b1
        return np.tanh(A) if self.activation == "tanh" else A

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.hidden(X) @ self.W2 + self.b2


def _init_mlp(d: int, cfg: MlpConfig, rng: np.random.Generator) -> Mlp:
    out = cfg.out_dim or d
    if cfg.init == "identity":
        return Mlp(np.eye(d, cfg.hidden), np.zeros(cfg.hidden), np.eye(cfg.hidden, out), np.zeros(out), cfg.activation)
    return Mlp(
        rng.normal(0, 1 / np.sqrt(d), (d, cfg.hidden)), np.zeros(cfg.hidden),
        rng.normal(0, 1 / np.sqrt(cfg.hidden), (cfg.hidden, out)), np.zeros(out), cfg.activation,
    )


def train_mlp(X: np.ndarray, labels: np.ndarray, nodes: np.ndarray, cfg: MlpConfig) -> Mlp:
    """SGD on softmax cross-entropy through a throwaway linear head."""
    rng = np.random.default_rng(cfg.seed)
    X = np.asarray(X, float)
    mlp = _init_mlp(X.shape[1], cfg, rng)
    y = labels_for("softmax", np.asarray(labels)[nodes])
    C = int(y.max()) + 1 if y.size else 1
    out = mlp.W2.shape[1]
    V = np.zeros((out, C))
    c = np.zeros(C)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(nodes.size)
        for start in range(0, perm.size, cfg.batch_size):
            b = perm[start : start + cfg.batch_size]
            xb, yb = X[nodes[b]], y[b]
            A1 = xb @ mlp.W1 + mlp.b1
            Z1 = np.tanh(A1) if mlp.activation == "tanh" else A1
            Z2 = Z1 @ mlp.W2 + mlp.b2
            P = softmax(Z2 @ V + c, axis=1)
            P[np.arange(b.size), yb] -= 1.0
            dS = P / b.size
            dZ2 = dS @ V.T
            dZ1 = dZ2 @ mlp.W2.T
            dA1 = dZ1 * (1.0 - Z1 ** 2) if mlp.activation == "tanh" else dZ1
            V -= cfg.lr * Z2.T @ dS
            c -= cfg.lr * dS.sum(axis=0)
            mlp.W2 -= cfg.lr * Z1.T @ dZ2
            mlp.b2 -= cfg.lr * dZ2.sum(axis=0)
            mlp.W1 -= cfg.lr * xb.T @ dA1
            mlp.b1 -= cfg.lr * dA1.sum(axis=0)
        if not np.all(np.isfinite(mlp.W1)):
            raise TrainingDiverged(epoch)
    return mlp


def mlp_feature_mode(
    X: np.ndarray,
    labels: np.ndarray,
    train_nodes,
    cfg: MlpConfig,
    deleted=(),
) -> tuple[np.ndarray, dict]:
    """Features ``Z = MLP(X)`` from an MLP fit only on non-deleted nodes.

    The projection is exact with respect to rows of ``Z``; that certifies
    removal of the deleted nodes only because the MLP never saw them.
    """
    X = np.asarray(X, float)
    train_nodes = node_set(train_nodes, X.shape[0])
    deleted = node_set(deleted, X.shape[0])
    clash = np.intersect1d(train_nodes, deleted)
    if clash.size:
        raise ConfigError(f"mlp training set contains {clash.size} deleted nodes")
    mlp = train_mlp(X, labels, train_nodes, cfg)
    meta = {
        "hidden": cfg.hidden, "activation": cfg.activation, "epochs": cfg.epochs, "init": cfg.init,
        "mlp_train_nodes": int(train_nodes.size),
        "caveat": "removal is exact for MLP outputs only; the MLP was fit without the deleted nodes",
    }
    return mlp(X), meta


# -- report writers -------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def strip_timing(obj):
    """Drop wall-clock fields so two runs can be compared byte for byte."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return ""
    columns = columns or list(rows[0])
    body = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def format_mapping(d: dict, indent: int = 0) -> str:
    """Aligned ``key  value`` lines, nested dicts indented."""
    flat = {k: v for k, v in d.items() if not isinstance(v, dict)}
    width = max((len(str(k)) for k in flat), default=0)
    lines = []
    for k, v in d.items():
        pad = " " * indent
        if isinstance(v, dict):
            lines.append(f"{pad}{k}:")
            lines.append(format_mapping(v, indent + 2).rstrip("\n"))
        else:
            lines.append(f"{pad}{str(k).ljust(width)}  {_cell(v)}")
    return "\n".join(line for line in lines if line) + "\n"


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

