"""Convex classifiers on propagated node features.

Weights are always a ``C x d`` matrix; binary losses use ``C == 1``.
Binary kinds (``logistic``, ``hinge``) take labels in {-1, +1}; multi-class
kinds (``softmax``, ``ovr_logistic``) take labels in ``0..C-1``.  Every
objective averages the data term over the node set and adds
``(lam / 2) * ||W||_F^2``.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import FormatError, IncompatibleModel, TrainingDiverged

LOSS_KINDS = ("logistic", "softmax", "ovr_logistic", "hinge")
BINARY_KINDS = ("logistic", "hinge")
MODEL_MAGIC = 0x4C4D5547  # b"GUML"


@dataclass(frozen=True)
class Provenance:
    lam: float
    eta: float
    epochs: int
    batch_size: int | None = None
    seed: int = 0
    init_kind: str = "zeros"
    finetune_steps: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True)
class ModelWeights:
    W: np.ndarray
    loss_kind: str
    provenance: Provenance

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind in BINARY_KINDS and W.shape[0] != 1:
            raise ValueError(f"{self.loss_kind} weights must have one row")
        if not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "W", W)

    @property
    def num_classes(self) -> int:
        return 2 if self.loss_kind in BINARY_KINDS else self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def with_weights(self, W: np.ndarray, **prov) -> "ModelWeights":
        p = replace(self.provenance, **prov) if prov else self.provenance
        return ModelWeights(np.asarray(W, float).reshape(self.W.shape), self.loss_kind, p)


@dataclass
class TrainTrace:
    objective: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    wall_clock: float = 0.0


@dataclass(frozen=True)
class LossGrad:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-4
    eta: float | None = None
    epochs: int = 100
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def check_labels(labels: np.ndarray, loss_kind: str, num_classes: int | None = None) -> None:
    y = np.asarray(labels)
    if loss_kind in BINARY_KINDS:
        if not np.isin(y, (-1, 1)).all():
            raise IncompatibleModel(f"{loss_kind} needs labels in {{-1, +1}}")
    elif loss_kind in ("softmax", "ovr_logistic"):
        if y.size and (y.min() < 0 or (num_classes is not None and y.max() >= num_classes)):
            raise IncompatibleModel(f"{loss_kind} needs labels in 0..{num_classes - 1 if num_classes else 'C-1'}")
    else:
        raise IncompatibleModel(f"unknown loss kind {loss_kind!r}")


def labels_for(loss_kind: str, labels: np.ndarray) -> np.ndarray:
    """Recode labels between {-1, +1} and {0, 1} to suit ``loss_kind``."""
    y = np.asarray(labels, dtype=np.int64)
    vals = set(np.unique(y).tolist())
    if loss_kind in BINARY_KINDS and vals <= {0, 1}:
        return 2 * y - 1
    if loss_kind not in BINARY_KINDS and vals <= {-1, 1} and -1 in vals:
        return (y + 1) // 2
    return y


def _ovr_signs(y: np.ndarray, C: int) -> np.ndarray:
    return np.where(y[:, None] == np.arange(C)[None, :], 1.0, -1.0)


def loss_and_grad(
    W: np.ndarray, H: np.ndarray, labels: np.ndarray, nodes: np.ndarray, lam: float, loss_kind: str,
) -> LossGrad:
    """Regularized objective and its (sub)gradient on ``nodes``.

    For ``ovr_logistic`` the objective is the sum of the per-class binary
    objectives.  The hinge subgradient takes the zero branch at margin 1.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    nodes = np.asarray(nodes, dtype=np.int64)
    C = W.shape[0]
    y = np.asarray(labels)[nodes]
    check_labels(y, loss_kind, C)
    Hs = H[nodes]
    m = max(nodes.size, 1)
    reg = 0.5 * lam * float(np.sum(W * W))
    grad = lam * W.copy()
    if loss_kind == "logistic":
        z = y * (Hs @ W[0])
        value = reg - float(np.sum(log_expit(z))) / m
        coef = -y * expit(-z)
        grad[0] += coef @ Hs / m
    elif loss_kind == "ovr_logistic":
        S = _ovr_signs(y, C)
        Z = S * (Hs @ W.T)
        value = reg - float(np.sum(log_expit(Z))) / m
        grad += (-S * expit(-Z)).T @ Hs / m
    elif loss_kind == "softmax":
        A = Hs @ W.T
        lse = logsumexp(A, axis=1) if nodes.size else np.zeros(0)
        value = reg + float(np.sum(lse - A[np.arange(nodes.size), y])) / m
        Pm = np.exp(A - lse[:, None])
        Pm[np.arange(nodes.size), y] -= 1.0
        grad += Pm.T @ Hs / m
    else:  # hinge
        margin = y * (Hs @ W[0])
        active = margin < 1.0
        value = reg + float(np.sum(np.maximum(0.0, 1.0 - margin))) / m
        grad[0] -= (y[active]) @ Hs[active] / m
    return LossGrad(value, grad)


def objective(W, H, labels, nodes, lam, loss_kind) -> float:
    return loss_and_grad(W, H, labels, nodes, lam, loss_kind).value


def hessian(
    W: np.ndarray, H: np.ndarray, labels: np.ndarray, nodes: np.ndarray, lam: float, loss_kind: str,
) -> np.ndarray:
    """``lam I + mean s(1-s) h h^T`` with ``s = sigmoid(y w^T h)``.

    Returns ``d x d`` for ``logistic`` and a ``C x d x d`` stack (one block
    per class) for ``ovr_logistic``.
    """
    if loss_kind not in ("logistic", "ovr_logistic"):
        raise IncompatibleModel(f"Hessian only implemented for logistic losses, not {loss_kind!r}")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    nodes = np.asarray(nodes, dtype=np.int64)
    C, d = W.shape
    y = np.asarray(labels)[nodes]
    check_labels(y, loss_kind, C)
    Hs = H[nodes]
    m = max(nodes.size, 1)
    S = y[:, None].astype(float) if loss_kind == "logistic" else _ovr_signs(y, C)
    s = expit(S * (Hs @ W.T))
    curv = s * (1.0 - s)  # n x C
    out = np.empty((C, d, d))
    for c in range(C):
        hc = lam * np.eye(d) + (Hs * curv[:, c : c + 1]).T @ Hs / m
        out[c] = 0.5 * (hc + hc.T)
    return out[0] if loss_kind == "logistic" else out


def smoothness_rate(H: np.ndarray, nodes: np.ndarray, lam: float) -> float:
    """``1 / (lam + max ||h_i||^2)``, a safe constant step for every loss kind."""
    nodes = np.asarray(nodes, dtype=np.int64)
    hmax = float(np.max(np.sum(H[nodes] ** 2, axis=1))) if nodes.size else 0.0
    return 1.0 / (lam + hmax) if lam + hmax > 0 else 1.0


def infer_num_classes(labels: np.ndarray, loss_kind: str) -> int:
    return 1 if loss_kind in BINARY_KINDS else int(np.max(labels)) + 1


def train(
    H: np.ndarray,
    labels: np.ndarray,
    nodes: np.ndarray,
    loss_kind: str,
    config: TrainConfig,
    init: np.ndarray | None = None,
    num_classes: int | None = None,
) -> tuple[ModelWeights, TrainTrace]:
    """Full-batch gradient descent, or seeded mini-batch SGD.

    Full batch when ``batch_size`` is ``None`` or covers the node set;
    otherwise each epoch visits a fresh permutation in consecutive batches.
    Starts from zeros unless ``init`` is given.  ``trace.objective[0]`` is
    the objective at the initial point, followed by one value per epoch.
    """
    t0 = time.perf_counter()
    H = np.asarray(H, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.int64)
    if loss_kind not in LOSS_KINDS:
        raise IncompatibleModel(f"unknown loss kind {loss_kind!r}")
    C = 1 if loss_kind in BINARY_KINDS else (num_classes or infer_num_classes(np.asarray(labels)[nodes], loss_kind))
    check_labels(np.asarray(labels)[nodes], loss_kind, C)
    W = np.zeros((C, H.shape[1])) if init is None else np.array(np.atleast_2d(init), dtype=np.float64)
    eta = config.eta if config.eta is not None else smoothness_rate(H, nodes, config.lam)
    bs = config.batch_size if config.batch_size is not None and config.batch_size < nodes.size else None
    rng = np.random.default_rng(config.seed)

    trace = TrainTrace()
    lg = loss_and_grad(W, H, labels, nodes, config.lam, loss_kind)
    trace.objective.append(lg.value)
    trace.grad_norm.append(float(np.linalg.norm(lg.grad)))
    for epoch in range(1, config.epochs + 1):
        if bs is None:
            W = W - eta * lg.grad
        else:
            perm = nodes[rng.permutation(nodes.size)]
            for start in range(0, perm.size, bs):
                g = loss_and_grad(W, H, labels, perm[start : start + bs], config.lam, loss_kind).grad
                W = W - eta * g
        lg = loss_and_grad(W, H, labels, nodes, config.lam, loss_kind)
        if not np.isfinite(lg.value) or not np.all(np.isfinite(W)):
            raise TrainingDiverged(epoch, lg.value)
        trace.objective.append(lg.value)
        trace.grad_norm.append(float(np.linalg.norm(lg.grad)))
    trace.wall_clock = time.perf_counter() - t0
    prov = Provenance(config.lam, eta, config.epochs, bs, config.seed, "zeros" if init is None else "given")
    return ModelWeights(W, loss_kind, prov), trace


def finetune(
    model: ModelWeights,
    H_remain: np.ndarray,
    labels: np.ndarray,
    remain_nodes: np.ndarray,
    steps: int,
    lr: float | None = None,
) -> ModelWeights:
    """``steps`` full-batch GD steps on the remaining data.

    Default rate is ``1 / (lam + (B_x P_s)^2)`` with ``B_x P_s`` estimated by
    the largest propagated row norm.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return model
    lam = model.provenance.lam
    rate = lr if lr is not None else smoothness_rate(H_remain, remain_nodes, lam)
    W = model.W.copy()
    for k in range(1, steps + 1):
        lg = loss_and_grad(W, H_remain, labels, remain_nodes, lam, model.loss_kind)
        W = W - rate * lg.grad
        if not np.all(np.isfinite(W)):
            raise TrainingDiverged(k)
    return model.with_weights(W, finetune_steps=model.provenance.finetune_steps + steps)


def pegasos_train(
    H: np.ndarray,
    labels: np.ndarray,
    nodes: np.ndarray,
    config: TrainConfig,
    project_ball: bool = True,
) -> ModelWeights:
    """Pegasos on the averaged hinge objective, starting from zero.

    ``config.epochs`` is the number of iterations; each draws a batch of
    ``batch_size`` nodes (all nodes when ``None``) and steps with rate
    ``1 / (lam t)``.  The optional ball projection only rescales ``w`` so the
    iterate stays in the feature span.
    """
    lam = config.lam
    if lam <= 0:
        raise ValueError("pegasos needs lam > 0")
    H = np.asarray(H, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.int64)
    y_all = np.asarray(labels)
    check_labels(y_all[nodes], "hinge")
    rng = np.random.default_rng(config.seed)
    k = nodes.size if config.batch_size is None else min(config.batch_size, nodes.size)
    w = np.zeros(H.shape[1])
    radius = 1.0 / np.sqrt(lam)
    for t in range(1, config.epochs + 1):
        batch = nodes if k == nodes.size else rng.choice(nodes, size=k, replace=False)
        Hb, yb = H[batch], y_all[batch]
        active = yb * (Hb @ w) < 1.0
        eta = 1.0 / (lam * t)
        w = (1.0 - eta * lam) * w + (eta / k) * (yb[active] @ Hb[active])
        if project_ball:
            nrm = np.linalg.norm(w)
            if nrm > radius:
                w *= radius / nrm
        if not np.all(np.isfinite(w)):
            raise TrainingDiverged(t)
    prov = Provenance(lam, float("nan"), config.epochs, config.batch_size, config.seed, "zeros")
    return ModelWeights(w[None, :], "hinge", prov)


def decision_scores(model: ModelWeights, H: np.ndarray) -> np.ndarray:
    return np.asarray(H, float) @ model.W.T


def predict(model: ModelWeights, H: np.ndarray) -> np.ndarray:
    """Sign (binary, 0 goes to -1) or argmax (first maximal class wins)."""
    scores = decision_scores(model, H)
    if model.loss_kind in BINARY_KINDS:
        return np.where(scores[:, 0] > 0, 1, -1)
    return np.argmax(scores, axis=1)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    classes = np.union1d(y_true, y_pred)
    if classes.size == 0:
        return 0.0
    f1 = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1))


def evaluate(model: ModelWeights, H: np.ndarray, labels: np.ndarray, nodes: np.ndarray) -> dict:
    nodes = np.asarray(nodes, dtype=np.int64)
    scores = decision_scores(model, H[nodes])
    pred = predict(model, H[nodes])
    y = np.asarray(labels)[nodes]
    acc = float(np.mean(pred == y)) if nodes.size else float("nan")
    return {"accuracy": acc, "macro_f1": macro_f1(y, pred), "scores": scores, "predictions": pred}


# -- model file -----------------------------------------------------------

_LOSS_CODES = {k: i for i, k in enumerate(LOSS_KINDS)}


def _fmt(v) -> str:
    return "none" if v is None else repr(v)


def save_model(path: str | Path, model: ModelWeights) -> None:
    """Header (magic, C, d, loss code), row-major float64 weights, provenance block."""
    C, d = model.W.shape
    p = model.provenance
    prov = {
        "lambda": _fmt(float(p.lam)), "eta": _fmt(float(p.eta)), "epochs": str(p.epochs),
        "batch_size": _fmt(p.batch_size), "seed": str(p.seed), "init_kind": p.init_kind,
        "finetune_steps": str(p.finetune_steps),
    }
    block = "".join(f"{k}={prov[k]}\n" for k in sorted(prov)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IIII", MODEL_MAGIC, C, d, _LOSS_CODES[model.loss_kind]))
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)


def load_model(path: str | Path) -> ModelWeights:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated model header")
    magic, C, d, code = struct.unpack("<IIII", data[:16])
    if magic != MODEL_MAGIC or code >= len(LOSS_KINDS):
        raise FormatError(f"{path}: not a model file")
    off = 16 + 8 * C * d
    if len(data) < off + 4:
        raise FormatError(f"{path}: truncated weights")
    W = np.frombuffer(data[16:off], dtype="<f8").reshape(C, d).astype(np.float64)
    (blen,) = struct.unpack("<I", data[off : off + 4])
    block = data[off + 4 : off + 4 + blen]
    if len(block) != blen:
        raise FormatError(f"{path}: truncated provenance block")
    kv = dict(line.split("=", 1) for line in block.decode("utf-8").splitlines() if line)

    def num(key, cast, default=None):
        v = kv.get(key, "none")
        return default if v == "none" else cast(v)

    prov = Provenance(
        lam=num("lambda", float, 0.0), eta=num("eta", float, float("nan")), epochs=num("epochs", int, 0),
        batch_size=num("batch_size", int), seed=num("seed", int, 0), init_kind=kv.get("init_kind", "zeros"),
        finetune_steps=num("finetune_steps", int, 0),
    )
    return ModelWeights(W, LOSS_KINDS[code], prov)
