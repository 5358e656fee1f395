"""Unlearning engines and the analytic closeness checks.

``projector_unlearn`` is exact: every weight row (every ``d``-wide hop block
for concatenated multi-hop inputs) is replaced by its orthogonal projection
onto the span of the remaining raw feature rows.  The Newton-step baselines
(``influence_plus_unlearn``, ``fisher_plus_unlearn``) and ``retrain_baseline``
exist for comparison.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import CapacitanceSingular, ConfigError, EmptyRemainingSet, FactorizationError, IncompatibleModel
from .features import GramState, delta_measure, gram_downdate, project_onto_span
from .graph import affected_set, node_set
from .linear_model import ModelWeights, TrainConfig, finetune, hessian, loss_and_grad, train
from .task import GraphTask

logger = logging.getLogger(__name__)

STRATEGIES = ("projector", "influence_plus", "fisher_plus", "retrain")
SPAN_WARN = 1e-4


@dataclass(frozen=True)
class UnlearnRequest:
    deleted: np.ndarray
    strategy: str = "projector"
    noise_std: float = 0.0
    finetune_K: int = 0
    finetune_lr: float | None = None
    ridge_eps: float | None = None
    seed: int = 0
    corrected: bool = False
    probe_column: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown value {self.strategy!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std: must be >= 0")
        if self.finetune_K < 0:
            raise ConfigError("finetune_K: must be >= 0")
        object.__setattr__(self, "deleted", node_set(self.deleted))


@dataclass
class UnlearnResult:
    model: ModelWeights
    strategy: str
    elapsed: float
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, model_path: str | None = None) -> dict:
        return {
            "strategy": self.strategy,
            "elapsed_seconds": self.elapsed,
            "diagnostics": self.diagnostics,
            "model_path": model_path,
        }


@dataclass(frozen=True)
class BoundConstants:
    B_x: float
    B_w: float
    P_s: float
    P_d: float
    G_est: float
    delta: float
    lam: float
    eta: float
    T: int
    deleted_count: int
    num_nodes: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be >= 0, got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


def _check_deleted(task: GraphTask, deleted: np.ndarray) -> np.ndarray:
    if deleted.size and (deleted[0] < 0 or deleted[-1] >= task.num_nodes):
        raise ConfigError(f"deleted: node index out of range [0, {task.num_nodes})")
    remaining_train = np.setdiff1d(task.train_nodes, deleted)
    if remaining_train.size == 0:
        raise EmptyRemainingSet("empty remaining set: every training node is deleted")
    return remaining_train


def _check_dims(model: ModelWeights, task: GraphTask) -> None:
    if model.dim != task.H.shape[1]:
        raise IncompatibleModel(f"model dim {model.dim} != feature dim {task.H.shape[1]}")


def probe_norm(W: np.ndarray, column: int, d: int) -> float:
    """Norm of the weights on raw feature ``column`` across classes and hop blocks."""
    return float(np.linalg.norm(np.atleast_2d(W)[:, column::d]))


def _block_rows(W: np.ndarray, d: int) -> np.ndarray:
    return W.reshape(-1, d)


def projector_unlearn(
    model: ModelWeights,
    task: GraphTask,
    request: UnlearnRequest,
    gram: GramState | None = None,
    check_span: bool = True,
) -> UnlearnResult:
    """Project the weights onto ``span{x_i : i not deleted}``.

    Without ``gram`` the remaining Gram matrix is formed directly from the
    remaining rows.  With a ``gram`` precomputed on all rows (and its cached
    inverse) the deleted rows are removed by a Woodbury downdate; if that is
    numerically singular the Gram is rebuilt from the remaining rows and the
    fallback is recorded in the diagnostics.
    """
    _check_dims(model, task)
    deleted = request.deleted
    _check_deleted(task, deleted)
    X = task.features
    n, d = X.shape
    rows = _block_rows(model.W, d)
    diag: dict = {"affected_set_size": int(deleted.size)}
    if check_span and np.any(rows):
        before = project_onto_span(rows, X, ridge_eps=request.ridge_eps).w_projected
        res = float(np.linalg.norm(rows - before))
        diag["span_residual_before"] = res
        if res > SPAN_WARN * np.linalg.norm(rows):
            logger.warning("weights are not in the feature span (residual %.3e)", res)

    t0 = time.perf_counter()
    keep = np.ones(n, dtype=bool)
    keep[deleted] = False
    X_remain = X[keep]
    state = None
    if gram is not None:
        if gram.source_rows != n or gram.dim != d:
            raise IncompatibleModel("precomputed Gram does not match the feature matrix")
        try:
            state = gram_downdate(gram, X[deleted], "woodbury", X_remain=X_remain)
        except CapacitanceSingular as exc:
            logger.info("woodbury downdate singular, rebuilding: %s", exc)
            state = gram_downdate(gram, X[deleted], "direct", X_remain=X_remain)
            state = GramState(state.gram, state.source_rows, state.inverse, state.ridge_eps, "direct-fallback")
        diag["gram_path"] = state.path
    else:
        diag["gram_path"] = "option1"
    proj = project_onto_span(rows, X_remain, gram_remain=state, ridge_eps=request.ridge_eps)
    out = model.with_weights(proj.w_projected.reshape(model.W.shape))
    if request.finetune_K:
        reduced, _ = task.without(deleted)
        out = finetune(out, reduced.H, reduced.labels, reduced.train_nodes, request.finetune_K, request.finetune_lr)
    elapsed = time.perf_counter() - t0

    scale = max(float(np.linalg.norm(rows)), np.finfo(float).tiny)
    diag.update(
        orthogonality_residual=proj.orthogonality_residual,
        relative_orthogonality_residual=proj.orthogonality_residual / scale,
        projection_route=proj.route,
        refinements=proj.refinements,
        finetune_K=request.finetune_K,
    )
    if request.probe_column is not None:
        diag["injected_channel_norm"] = probe_norm(out.W, request.probe_column, d)
    return UnlearnResult(out, "projector", elapsed, diag)


def _need_logistic(model: ModelWeights, name: str) -> None:
    if model.loss_kind not in ("logistic", "ovr_logistic"):
        raise IncompatibleModel(f"{name} supports logistic and ovr_logistic models, not {model.loss_kind}")
    if model.provenance.lam <= 0:
        raise IncompatibleModel(f"{name} needs lambda > 0 for an invertible Hessian")


def _as_stack(Hs: np.ndarray) -> np.ndarray:
    return Hs[None] if Hs.ndim == 2 else Hs


def _solve_spd(Hs: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Per-class solve ``Hs[c] x = G[c]``."""
    out = np.empty_like(G)
    for c, (Hc, gc) in enumerate(zip(_as_stack(Hs), G)):
        try:
            out[c] = sla.solve(Hc, gc, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"Hessian factorization failed: {exc}") from None
    return out


def _hessian_sum(W, H, labels, nodes, kind) -> np.ndarray:
    """``sum_i s_i (1 - s_i) h_i h_i^T`` over ``nodes`` (no regularizer)."""
    if nodes.size == 0:
        return np.zeros((W.shape[0], W.shape[1], W.shape[1]))
    return _as_stack(hessian(W, H, labels, nodes, 0.0, kind)) * nodes.size


def _grad_sum(W, H, labels, nodes, kind) -> np.ndarray:
    if nodes.size == 0:
        return np.zeros_like(W)
    return loss_and_grad(W, H, labels, nodes, 0.0, kind).grad * nodes.size


def _add_noise(W: np.ndarray, std: float, seed: int, transform=None) -> np.ndarray:
    if std == 0:
        return W
    b = np.random.default_rng(seed).normal(0.0, std, size=W.shape)
    if transform is not None:
        b = np.stack([transform[c] @ b[c] for c in range(W.shape[0])])
    return W + b


def influence_plus_unlearn(model: ModelWeights, task: GraphTask, request: UnlearnRequest) -> UnlearnResult:
    """One influence-function Newton step that forgets the whole affected set.

    ``A`` is the set of training nodes within distance ``< L`` of a deleted
    node and ``R`` the other training nodes.  If ``w`` minimizes the
    objective on all training nodes, a Newton step towards the minimizer
    on ``R`` is ``w + (|A|/|R|) H_R^-1 grad F(w, A)`` with everything on the
    pre-deletion propagation.

    ``corrected=True`` instead keeps the nodes of ``A`` that survive, with
    their post-deletion features: the step uses the gradient and Hessian of
    the post-deletion objective, assembled from the stationarity of ``w``.
    """
    _need_logistic(model, "influence_plus")
    _check_dims(model, task)
    deleted = request.deleted
    _check_deleted(task, deleted)
    t0 = time.perf_counter()
    W, kind, lam = model.W, model.loss_kind, model.provenance.lam
    hops = max(task.hops - 1, 1) if task.multi_hop else max(task.hops, 1)
    affected = np.intersect1d(affected_set(task.graph, deleted, hops), task.train_nodes)
    remain = np.setdiff1d(task.train_nodes, affected)
    N = task.train_nodes.size
    H, y = task.H, task.labels
    if affected.size == 0:
        step = np.zeros_like(W)
    elif not request.corrected:
        if remain.size == 0:
            raise EmptyRemainingSet("influence_plus: every training node is affected by the deletion")
        grad_A = lam * W + _grad_sum(W, H, y, affected, kind) / affected.size
        hess_R = lam * np.eye(W.shape[1]) + _hessian_sum(W, H, y, remain, kind) / remain.size
        step = (affected.size / remain.size) * _solve_spd(hess_R, grad_A)
    else:
        reduced, index_map = task.without(deleted)
        survivors = np.setdiff1d(affected, deleted)
        new_idx = index_map[survivors]
        Rp = N - np.intersect1d(task.train_nodes, deleted).size
        g = lam * W * (1.0 - N / Rp) + (
            _grad_sum(W, reduced.H, reduced.labels, new_idx, kind) - _grad_sum(W, H, y, affected, kind)
        ) / Rp
        hess = lam * np.eye(W.shape[1]) + (
            _hessian_sum(W, H, y, remain, kind) + _hessian_sum(W, reduced.H, reduced.labels, new_idx, kind)
        ) / Rp
        step = -_solve_spd(hess, g)
    W_new = _add_noise(W + step, request.noise_std, request.seed)
    elapsed = time.perf_counter() - t0
    diag = {
        "affected_set_size": int(affected.size),
        "corrected": request.corrected,
        "step_norm": float(np.linalg.norm(step)),
        "noise_draw_seed": request.seed,
    }
    if request.probe_column is not None:
        diag["injected_channel_norm"] = probe_norm(W_new, request.probe_column, task.features.shape[1])
    return UnlearnResult(model.with_weights(W_new), "influence_plus", elapsed, diag)


def inverse_quarter_root(Hc: np.ndarray, floor: float) -> np.ndarray:
    """``Hc^{-1/4}`` by symmetric eigendecomposition, eigenvalues clamped at ``floor``."""
    try:
        vals, vecs = np.linalg.eigh(0.5 * (Hc + Hc.T))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"eigendecomposition failed: {exc}") from None
    vals = np.maximum(vals, floor)
    return (vecs * vals ** -0.25) @ vecs.T


def fisher_plus_unlearn(model: ModelWeights, task: GraphTask, request: UnlearnRequest) -> UnlearnResult:
    """Newton step on the remaining training nodes of the reduced graph, plus
    ``H_r^{-1/4} b`` with ``b ~ N(0, noise_std^2 I)``."""
    _need_logistic(model, "fisher_plus")
    _check_dims(model, task)
    deleted = request.deleted
    _check_deleted(task, deleted)
    t0 = time.perf_counter()
    W, kind, lam = model.W, model.loss_kind, model.provenance.lam
    reduced, _ = task.without(deleted)
    g = loss_and_grad(W, reduced.H, reduced.labels, reduced.train_nodes, lam, kind).grad
    Hr = _as_stack(hessian(W, reduced.H, reduced.labels, reduced.train_nodes, lam, kind))
    W_new = W - _solve_spd(Hr, g)
    if request.noise_std > 0:
        roots = np.stack([inverse_quarter_root(h, lam / 2) for h in Hr])
        W_new = _add_noise(W_new, request.noise_std, request.seed, roots)
    elapsed = time.perf_counter() - t0
    diag = {
        "affected_set_size": int(reduced.train_nodes.size),
        "gradient_norm": float(np.linalg.norm(g)),
        "noise_draw_seed": request.seed,
    }
    if request.probe_column is not None:
        diag["injected_channel_norm"] = probe_norm(W_new, request.probe_column, task.features.shape[1])
    return UnlearnResult(model.with_weights(W_new), "fisher_plus", elapsed, diag)


def config_from(model: ModelWeights) -> TrainConfig:
    p = model.provenance
    eta = None if not np.isfinite(p.eta) else p.eta
    return TrainConfig(lam=p.lam, eta=eta, epochs=p.epochs, batch_size=p.batch_size, seed=p.seed)


def retrain_baseline(
    task: GraphTask,
    deleted,
    config: TrainConfig,
    loss_kind: str,
    num_classes: int | None = None,
    probe_column: int | None = None,
) -> UnlearnResult:
    """Delete the nodes, rebuild the propagation and train from zero with ``config``."""
    deleted = node_set(deleted)
    _check_deleted(task, deleted)
    t0 = time.perf_counter()
    reduced, _ = task.without(deleted)
    model, trace = train(reduced.H, reduced.labels, reduced.train_nodes, loss_kind, config, num_classes=num_classes)
    elapsed = time.perf_counter() - t0
    diag = {"final_objective": trace.objective[-1], "remaining_train": int(reduced.train_nodes.size)}
    if probe_column is not None:
        diag["injected_channel_norm"] = probe_norm(model.W, probe_column, task.features.shape[1])
    return UnlearnResult(model, "retrain", elapsed, diag)


def run_strategy(
    model: ModelWeights,
    task: GraphTask,
    request: UnlearnRequest,
    gram: GramState | None = None,
) -> UnlearnResult:
    if request.deleted.size == 0 and request.strategy != "retrain" and request.noise_std == 0 and not request.finetune_K:
        # nothing to forget; skip the roundoff of a no-op projection or Newton step
        _check_deleted(task, request.deleted)
        diag = {"affected_set_size": 0, "skipped": True}
        if request.probe_column is not None:
            diag["injected_channel_norm"] = probe_norm(model.W, request.probe_column, task.features.shape[1])
        return UnlearnResult(model, request.strategy, 0.0, diag)
    if request.strategy == "projector":
        return projector_unlearn(model, task, request, gram)
    if request.strategy == "influence_plus":
        return influence_plus_unlearn(model, task, request)
    if request.strategy == "fisher_plus":
        return fisher_plus_unlearn(model, task, request)
    if model.loss_kind == "hinge":
        raise IncompatibleModel("retrain of hinge models is not supported; use pegasos_train")
    C = None if model.loss_kind in ("logistic", "hinge") else model.W.shape[0]
    return retrain_baseline(task, request.deleted, config_from(model), model.loss_kind, C, request.probe_column)


# -- closeness bound ------------------------------------------------------


def _padded_powers(task: GraphTask, deleted: np.ndarray, hops: int):
    """``P^L`` and ``P_u^L`` re-indexed onto the original nodes (deleted rows zero)."""
    PL = task.propagation.power(hops)
    reduced, index_map = task.without(deleted)
    keep = np.flatnonzero(index_map >= 0)
    PuL = reduced.propagation.power(hops).tocoo()
    pad = sp.csr_matrix((PuL.data, (keep[PuL.row], keep[PuL.col])), shape=PL.shape)
    return PL, pad


def _max_row_norm(M) -> float:
    if M.nnz == 0:
        return 0.0
    return float(np.sqrt(np.max(np.asarray(M.multiply(M).sum(axis=1)).ravel())))


def _gradient_gap(W, task: GraphTask, deleted: np.ndarray, kind: str) -> float:
    """``||g - g~||`` with both averages over post-deletion per-node gradients."""
    if deleted.size == 0:
        return 0.0
    reduced, index_map = task.without(deleted)
    Hpad = np.zeros_like(task.H)
    keep = index_map >= 0
    Hpad[keep] = reduced.H
    remain = np.setdiff1d(task.train_nodes, deleted)
    g = _grad_sum(W, Hpad, task.labels, task.train_nodes, kind) / task.train_nodes.size
    g_tilde = _grad_sum(W, Hpad, task.labels, remain, kind) / remain.size
    return float(np.linalg.norm(g - g_tilde))


def estimate_constants(
    task: GraphTask,
    deleted,
    model: ModelWeights,
    sample_count: int = 8,
    seed: int = 0,
    extra_points: tuple = (),
    max_nodes: int = 5000,
) -> BoundConstants:
    """Measure the constants of the closeness bound on one instance.

    ``G_est`` is the largest gradient gap seen over the actual deleted set
    and ``sample_count`` random sets of the same size drawn from the
    training nodes, each evaluated at ``w = 0``, the model weights and every
    point in ``extra_points``.
    """
    if task.multi_hop:
        raise IncompatibleModel("the closeness bound is stated for a single propagation power")
    n = task.num_nodes
    if n > max_nodes:
        raise ConfigError(f"graph has {n} nodes; constants need sparse powers of P and are limited to {max_nodes}")
    deleted = node_set(deleted, n)
    _check_deleted(task, deleted)
    X = task.features
    B_x = float(np.max(np.linalg.norm(X, axis=1))) if n else 0.0
    B_w = float(np.linalg.norm(model.W))
    PL, PuL_pad = _padded_powers(task, deleted, task.hops)
    P_s = max(_max_row_norm(PL), _max_row_norm(PuL_pad))
    P_d = _max_row_norm((PL - PuL_pad).tocsr())
    delta = delta_measure(X, "against_set", deleted) if deleted.size else 0.0

    points = [np.zeros_like(model.W), model.W] + [np.atleast_2d(p) for p in extra_points]
    rng = np.random.default_rng(seed)
    sets = [deleted]
    if deleted.size:
        for _ in range(sample_count):
            cand = rng.choice(task.train_nodes, size=min(deleted.size, task.train_nodes.size - 1), replace=False)
            sets.append(np.sort(cand))
    G_est = 0.0
    for D in sets:
        for Wpt in points:
            G_est = max(G_est, _gradient_gap(Wpt, task, D, model.loss_kind))
    p = model.provenance
    return BoundConstants(
        B_x, B_w, P_s, P_d, G_est, float(delta), float(p.lam), float(p.eta), int(p.epochs), int(deleted.size), n,
    )


def _geometric_sum(x: float, T: int) -> float:
    """``sum_{t=1..T} (1 + x)^(t-1)`` for ``x >= 0``, ``inf`` on overflow."""
    if T <= 0:
        return 0.0
    if x == 0:
        return float(T)
    log_growth = T * math.log1p(x)
    if log_growth < 700:
        return math.expm1(log_growth) / x
    log_sum = log_growth + math.log1p(-math.exp(-log_growth)) - math.log(x)
    return math.exp(log_sum) if log_sum < 709 else math.inf


def theorem1_bound(c: BoundConstants) -> float:
    """``Q * sum_{t=1..T} (1 + eta (lam + B_x^2 P_s^2))^(t-1) + delta eta T m``
    with ``Q = eta ((1 + B_x B_w P_s) B_x P_d + G)``."""
    Q = c.eta * ((1.0 + c.B_x * c.B_w * c.P_s) * c.B_x * c.P_d + c.G_est)
    first = 0.0
    if Q > 0:
        first = Q * _geometric_sum(c.eta * (c.lam + (c.B_x * c.P_s) ** 2), c.T)
    return first + c.delta * c.eta * c.T * c.deleted_count


def prop2_condition(c: BoundConstants) -> dict:
    """Whether ``delta < ((lam eta T)^-1 + 1) B_x |V| / |V_delete|``."""
    if c.deleted_count < 1 or c.lam <= 0 or c.eta <= 0 or c.T <= 0:
        raise ValueError("needs at least one deleted node and positive lam, eta, T")
    threshold = (1.0 / (c.lam * c.eta * c.T) + 1.0) * c.B_x * c.num_nodes / c.deleted_count
    return {"holds": bool(c.delta < threshold), "threshold": threshold}
