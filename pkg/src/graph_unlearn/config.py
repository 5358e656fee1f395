"""Experiment configuration: a JSON document validated into dataclasses.

Every validation error names the offending field with a dotted path such
as ``model.lambda``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .linear_model import LOSS_KINDS

DEFAULTS: dict = {
    "dataset": {"csbm": {"n": 500, "p": 0.02, "q": 0.004, "dim": 16, "separation": 2.0, "noise_scale": None}},
    "split": {"train_fraction": 0.8},
    "propagation": {"mode": "row", "hops": 2, "self_loops": False, "multi_hop": False},
    "model": {"loss_kind": "logistic", "lambda": 1e-3, "eta": None, "epochs": 100, "batch_size": None},
    "unlearn": {
        "strategy": "projector", "delete": {"random_fraction": 0.01}, "noise_std": 0.0,
        "finetune_K": 0, "ridge_eps": None, "corrected": False,
    },
    "eval": {
        "strategies": ["projector", "influence_plus", "fisher_plus", "retrain"],
        "ratios": [0.01, 0.05, 0.1, 0.2], "seeds": [0, 1, 2], "delete_fraction": 0.05,
        "injection_mode": "multiclass", "injection_loss": None, "sample_count": 8,
    },
    "mlp": None,
    "feature_noise": 0.0,
    "seed": 0,
    "output_dir": "out",
}


def component_seed(root: int, name: str) -> int:
    """Independent, reproducible seed for one named component."""
    return int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])


def _merge(base: dict, over: dict) -> dict:
    """Deep merge; ``dataset`` and ``delete`` are replaced when they switch kind."""
    out = dict(base)
    for k, v in over.items():
        old = out.get(k)
        switch = k in ("dataset", "delete") and isinstance(old, dict) and isinstance(v, dict) and not set(old) & set(v)
        if isinstance(v, dict) and isinstance(old, dict) and not switch:
            out[k] = _merge(old, v)
        else:
            out[k] = v
    return out


def _num(sec: dict, key: str, path: str, lo=None, hi=None, integer=False, optional=False, open_lo=False):
    v = sec.get(key)
    name = f"{path}.{key}"
    if v is None:
        if optional:
            return None
        raise ConfigError(f"{name}: required")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    if lo is not None and (v < lo or (open_lo and v == lo)):
        raise ConfigError(f"{name}: {v} is below the allowed range (min {lo}{', exclusive' if open_lo else ''})")
    if hi is not None and v > hi:
        raise ConfigError(f"{name}: {v} is above the allowed range (max {hi})")
    return int(v) if integer else float(v)


def _choice(sec: dict, key: str, path: str, options):
    v = sec.get(key)
    if v not in options:
        raise ConfigError(f"{path}.{key}: {v!r} is not one of {list(options)}")
    return v


def _flag(sec: dict, key: str, path: str) -> bool:
    v = sec.get(key, False)
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}: expected true/false")
    return v


@dataclass(frozen=True)
class DeleteSpec:
    kind: str
    fraction: float | None = None
    ids: tuple = ()
    order: str = "largest"

    @classmethod
    def parse(cls, raw) -> "DeleteSpec":
        path = "unlearn.delete"
        if not isinstance(raw, dict) or len(raw) != 1:
            raise ConfigError(f"{path}: give exactly one of random_fraction, explicit_ids, degree_rank")
        (kind, val), = raw.items()
        if kind == "random_fraction":
            frac = _num(raw, kind, path, 0.0, 1.0, open_lo=True)
            if frac >= 1.0:
                raise ConfigError(f"{path}.random_fraction: must be below 1")
            return cls(kind, frac)
        if kind == "explicit_ids":
            if not isinstance(val, list) or not all(isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in val):
                raise ConfigError(f"{path}.explicit_ids: expected a list of non-negative integers")
            return cls(kind, ids=tuple(sorted(set(val))))
        if kind == "degree_rank":
            if not isinstance(val, dict):
                raise ConfigError(f"{path}.degree_rank: expected an object")
            order = _choice(val, "order", f"{path}.degree_rank", ("largest", "smallest"))
            frac = _num(val, "fraction", f"{path}.degree_rank", 0.0, 1.0, open_lo=True)
            if frac >= 1.0:
                raise ConfigError(f"{path}.degree_rank.fraction: must be below 1")
            return cls(kind, frac, order=order)
        raise ConfigError(f"{path}: unknown selection scheme {kind!r}")

    def select(self, degrees: np.ndarray, train_nodes: np.ndarray, seed: int) -> np.ndarray:
        """Deleted nodes, drawn from the training nodes (explicit ids taken as given)."""
        if self.kind == "explicit_ids":
            return np.asarray(self.ids, dtype=np.int64)
        k = max(1, int(round(self.fraction * train_nodes.size)))
        if self.kind == "random_fraction":
            rng = np.random.default_rng(seed)
            return np.sort(rng.choice(train_nodes, size=k, replace=False))
        deg = degrees[train_nodes]
        order = np.lexsort((train_nodes, -deg if self.order == "largest" else deg))
        return np.sort(train_nodes[order[:k]])


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict = field(repr=False)
    source: str
    csbm: dict | None
    files: dict | None
    train_fraction: float
    mode: str
    hops: int
    self_loops: bool
    multi_hop: bool
    loss_kind: str
    lam: float
    eta: float | None
    epochs: int
    batch_size: int | None
    strategy: str
    delete: DeleteSpec
    noise_std: float
    finetune_K: int
    ridge_eps: float | None
    corrected: bool
    strategies: tuple
    ratios: tuple
    seeds: tuple
    delete_fraction: float
    injection_mode: str
    injection_loss: str | None
    sample_count: int
    mlp: dict | None
    feature_noise: float
    seed: int
    output_dir: str

    def seed_for(self, component: str) -> int:
        return component_seed(self.seed, component)


def _validate_csbm(c: dict) -> dict:
    path = "dataset.csbm"
    out = {
        "n": _num(c, "n", path, 2, integer=True),
        "p": _num(c, "p", path, 0.0, 1.0),
        "q": _num(c, "q", path, 0.0, 1.0),
        "dim": _num(c, "dim", path, 1, integer=True),
        "separation": _num(c, "separation", path, 0.0) if "separation" in c else 2.0,
        "noise_scale": _num(c, "noise_scale", path, 0.0, optional=True),
    }
    if out["q"] > out["p"]:
        raise ConfigError(f"{path}.q: must not exceed p ({out['q']} > {out['p']})")
    return out


def validate(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config section")
    cfg = _merge(DEFAULTS, raw)
    ds = cfg["dataset"]
    csbm = files = None
    if not isinstance(ds, dict) or not ds:
        raise ConfigError("dataset: expected csbm parameters or edges/features/labels files")
    if "csbm" in ds:
        csbm = _validate_csbm(ds["csbm"])
        source = "csbm"
    else:
        files = {}
        for k in ("edges", "features", "labels"):
            if k not in ds:
                raise ConfigError(f"dataset.{k}: required for file datasets")
            p = Path(ds[k])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.{k}: file {str(p)!r} does not exist")
            files[k] = str(p)
        source = "files"

    sp, pr, m, u, ev = cfg["split"], cfg["propagation"], cfg["model"], cfg["unlearn"], cfg["eval"]
    hops = _num(pr, "hops", "propagation", 0, integer=True)
    multi_hop = _flag(pr, "multi_hop", "propagation")
    if multi_hop and hops < 1:
        raise ConfigError("propagation.hops: multi_hop needs hops >= 1")
    strategies = ev.get("strategies")
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("eval.strategies: expected a non-empty list")
    for s in strategies:
        _choice({"s": s}, "s", "eval.strategies[]", ("projector", "influence_plus", "fisher_plus", "retrain"))
    ratios = ev.get("ratios")
    if not isinstance(ratios, list) or not ratios:
        raise ConfigError("eval.ratios: expected a non-empty list")
    for r in ratios:
        _num({"r": r}, "r", "eval.ratios[]", 0.0, 1.0, open_lo=True)
        if r >= 1.0:
            raise ConfigError(f"eval.ratios: {r} must be below 1")
    seeds = ev.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("eval.seeds: expected a non-empty list of integers")
    frac = _num(ev, "delete_fraction", "eval", 0.0, 1.0, open_lo=True)
    if frac >= 1.0:
        raise ConfigError("eval.delete_fraction: must be below 1")
    mlp = cfg.get("mlp")
    if mlp is not None and not isinstance(mlp, dict):
        raise ConfigError("mlp: expected an object or null")
    seed = _num(cfg, "seed", "config", 0, integer=True)
    out_dir = cfg.get("output_dir")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir: expected a path string")
    return ExperimentConfig(
        raw=cfg,
        source=source,
        csbm=csbm,
        files=files,
        train_fraction=_num(sp, "train_fraction", "split", 0.0, 1.0, open_lo=True),
        mode=_choice(pr, "mode", "propagation", ("row", "symmetric")),
        hops=hops,
        self_loops=_flag(pr, "self_loops", "propagation"),
        multi_hop=multi_hop,
        loss_kind=_choice(m, "loss_kind", "model", LOSS_KINDS),
        lam=_num(m, "lambda", "model", 0.0),
        eta=_num(m, "eta", "model", 0.0, optional=True, open_lo=True),
        epochs=_num(m, "epochs", "model", 0, integer=True),
        batch_size=_num(m, "batch_size", "model", 1, integer=True, optional=True),
        strategy=_choice(u, "strategy", "unlearn", ("projector", "influence_plus", "fisher_plus", "retrain")),
        delete=DeleteSpec.parse(u.get("delete")),
        noise_std=_num(u, "noise_std", "unlearn", 0.0),
        finetune_K=_num(u, "finetune_K", "unlearn", 0, integer=True),
        ridge_eps=_num(u, "ridge_eps", "unlearn", 0.0, optional=True, open_lo=True),
        corrected=_flag(u, "corrected", "unlearn"),
        strategies=tuple(strategies),
        ratios=tuple(float(r) for r in ratios),
        seeds=tuple(seeds),
        delete_fraction=frac,
        injection_mode=_choice(ev, "injection_mode", "eval", ("multiclass", "binary")),
        injection_loss=None if ev.get("injection_loss") is None else _choice(ev, "injection_loss", "eval", LOSS_KINDS),
        sample_count=_num(ev, "sample_count", "eval", 0, integer=True),
        mlp=mlp,
        feature_noise=_num(cfg, "feature_noise", "config", 0.0),
        seed=seed,
        output_dir=out_dir,
    )


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    raw: dict = {}
    base = None
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise FormatError(f"cannot read config {p}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        base = p.parent
    if overrides:
        raw = _merge(raw, overrides)
    return validate(raw, base)
