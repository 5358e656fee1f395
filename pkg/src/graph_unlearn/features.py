"""Dense feature algebra for projection-based unlearning.

The projection of a weight vector onto ``span{rows of X_remain}`` is returned
as ``X_remain^T alpha``, so a feature column that is zero on every remaining
row gets an exactly zero weight.  Two routes compute ``alpha``:

* kernel route (``r <= d``): solve with the ``r x r`` matrix ``X X^T``;
* Gram route (``r > d``): ``alpha = X G^+ w`` with ``G = X^T X``.

Pseudo-inverses are taken as the ridge limit ``(M + eps I)^-1`` followed by
iterated refinement, which removes the ``O(eps)`` bias on every direction
whose eigenvalue is well above ``eps``.  The Gram route only ever feeds
right-hand sides lying in the range of ``G``, so directions outside the
span are not amplified by ``1/eps``.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import CapacitanceSingular, EmptyRemainingSet, FactorizationError, FormatError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = 0x46475547  # b"GUGF" little-endian
GRAM_MAGIC = 0x4D475547  # b"GUGM"

MAX_REFINE = 60
STALL_RATIO = 0.75
REFINE_TOL = 1e-15


def default_ridge(gram: np.ndarray) -> float:
    """``1e-8 * trace(G) / d``; any positive value works when ``G == 0``."""
    d = gram.shape[0]
    tr = float(np.trace(gram))
    return 1e-8 * tr / d if tr > 0 else 1.0


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class GramState:
    """``G = X^T X`` plus an optional cached ``(G + eps I)^-1``.

    ``path`` records how the state was produced (``"precompute"``,
    ``"woodbury"``, ``"direct"`` or ``"direct-fallback"``).
    """

    gram: np.ndarray
    source_rows: int
    inverse: np.ndarray | None = None
    ridge_eps: float | None = None
    path: str = "precompute"

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def with_inverse(self, ridge_eps: float | None = None) -> "GramState":
        eps = default_ridge(self.gram) if ridge_eps is None else float(ridge_eps)
        return replace(self, inverse=_ridge_inverse(self.gram, eps), ridge_eps=eps)


def _cho(gram: np.ndarray, eps: float):
    a = gram + eps * np.eye(gram.shape[0])
    try:
        return sla.cho_factor(a, lower=False, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(f"Cholesky of G + {eps:g} I failed: {exc}") from None


def _ridge_inverse(gram: np.ndarray, eps: float) -> np.ndarray:
    c = _cho(gram, eps)
    return _symmetrize(sla.cho_solve(c, np.eye(gram.shape[0])))


def gram_precompute(X: np.ndarray, ridge_eps: float | None = None, with_inverse: bool = False) -> GramState:
    """Accumulate ``X^T X`` in one pass and symmetrize it."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    state = GramState(_symmetrize(X.T @ X), X.shape[0])
    if with_inverse or ridge_eps is not None:
        state = state.with_inverse(ridge_eps)
    return state


def gram_downdate(
    state: GramState,
    X_delete: np.ndarray,
    strategy: str = "woodbury",
    X_remain: np.ndarray | None = None,
    capacitance_rcond: float = 1e-6,
) -> GramState:
    """Remove the rows ``X_delete`` from ``state``.

    ``woodbury`` updates the cached inverse through the ``m x m`` capacitance
    system ``I - U A^-1 U^T`` (``U = X_delete``, ``A = G + eps I``) in
    ``O(m d^2 + m^3)``.  Without a cached inverse it falls back to ``direct``
    and marks the result ``path="direct-fallback"``.  ``direct`` rebuilds
    the Gram from ``X_remain`` when given, otherwise subtracts
    ``X_delete^T X_delete``; the inverse is refreshed with the same eps.

    Raises :class:`CapacitanceSingular` when the capacitance reciprocal
    condition number drops below ``capacitance_rcond``.
    """
    U = np.asarray(X_delete, dtype=np.float64).reshape(-1, state.dim)
    m = U.shape[0]
    if m == 0:
        return state
    if m > state.source_rows:
        raise ValueError("cannot delete more rows than were accumulated")
    if strategy not in ("woodbury", "direct"):
        raise ValueError(f"unknown downdate strategy {strategy!r}")

    if strategy == "woodbury" and state.inverse is None:
        logger.warning("no cached inverse; falling back to direct Gram downdate")
        out = gram_downdate(state, U, "direct", X_remain)
        return replace(out, path="direct-fallback")

    if strategy == "direct":
        if X_remain is not None:
            G = _symmetrize(np.asarray(X_remain, float).T @ np.asarray(X_remain, float))
        else:
            G = _symmetrize(state.gram - U.T @ U)
        inv = None
        if state.inverse is not None:
            inv = _ridge_inverse(G, state.ridge_eps)
        return GramState(G, state.source_rows - m, inv, state.ridge_eps, "direct")

    A_inv = state.inverse
    AU = A_inv @ U.T  # d x m
    cap = _symmetrize(np.eye(m) - U @ AU)
    evals = np.linalg.eigvalsh(cap)
    if evals[0] <= capacitance_rcond * max(evals[-1], 1.0):
        raise CapacitanceSingular(
            f"capacitance min eigenvalue {evals[0]:.3e} (max {evals[-1]:.3e}); "
            "deleted rows remove a span direction"
        )
    try:
        correction = AU @ sla.solve(cap, AU.T, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise CapacitanceSingular(str(exc)) from None
    G = _symmetrize(state.gram - U.T @ U)
    return GramState(G, state.source_rows - m, _symmetrize(A_inv + correction), state.ridge_eps, "woodbury")


def _solver(state: GramState, eps: float):
    """Return ``v -> (G + eps I)^-1 v``, reusing the cached inverse if it matches."""
    if state.inverse is not None and state.ridge_eps is not None and np.isclose(state.ridge_eps, eps, rtol=1e-12, atol=0):
        inv = state.inverse
        return lambda v: inv @ v
    c = _cho(state.gram, eps)
    return lambda v: sla.cho_solve(c, v)


def pinv_solve(state: GramState, rhs: np.ndarray, ridge_eps: float | None = None, refine: int = 3) -> np.ndarray:
    """Ridge-limit solve ``(G + eps I)^-1 rhs`` standing in for ``G^+ rhs``.

    ``refine`` rounds of iterated Tikhonov correct the ``O(eps)`` bias on the
    range of ``G``.  Components of ``rhs`` outside the range come back scaled
    by ``refine/eps`` (the plain ridge answer grows as ``1/eps`` there too);
    pass right-hand sides that lie in the range of ``G``.
    """
    eps = default_ridge(state.gram) if ridge_eps is None else float(ridge_eps)
    solve = _solver(state, eps)
    rhs = np.asarray(rhs, dtype=np.float64)
    z = solve(rhs)
    for _ in range(refine):
        z = z + solve(rhs - state.gram @ z)
    return z


@dataclass(frozen=True)
class ProjectionResult:
    """Projection of one or more weight rows onto the remaining-feature span.

    ``alpha`` (shape ``k x r`` for ``k`` weight rows) is ``None`` unless
    requested; ``w_projected == alpha @ X_remain`` either way.
    """

    w_projected: np.ndarray
    orthogonality_residual: float
    elapsed: float
    alpha: np.ndarray | None = None
    refinements: int = 0
    route: str = "gram"


def _refined_kernel_alpha(W: np.ndarray, X: np.ndarray, ridge_eps: float | None) -> tuple[np.ndarray, int]:
    """``alpha = (X X^T)^+ X W^T`` via the ``r x r`` kernel; used when ``r <= d``.

    The right-hand side lies in the range of the kernel, so iterated ridge
    refinement converges to the pseudo-inverse solution.
    """
    K = _symmetrize(X @ X.T)
    eps = default_ridge(K) if ridge_eps is None else ridge_eps
    c = _cho(K, eps)
    alpha, rounds = _refine(lambda v: sla.cho_solve(c, v), K, X @ W.T)
    return alpha.T, rounds


def _refine(solve, M: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, int]:
    """``M^+ B`` for right-hand sides in the range of ``M``, by iterated ridge solves.

    Each round shrinks the error on an eigenvalue ``mu`` by ``eps / (mu + eps)``.
    Rounds stop at ``REFINE_TOL`` or once the correction stops shrinking,
    which is where only roundoff (or directions well below ``eps``) is left.
    """
    Z = solve(B)
    scale = max(np.linalg.norm(B), np.finfo(float).tiny)
    prev = np.inf
    rounds = 0
    for rounds in range(1, MAX_REFINE + 1):
        step = solve(B - M @ Z)
        Z = Z + step
        size = np.linalg.norm(M @ step)
        if size <= REFINE_TOL * scale or size > STALL_RATIO * prev:
            break
        prev = size
    return Z, rounds


def _refined_gram_alpha(W: np.ndarray, X: np.ndarray, state: GramState, eps: float) -> tuple[np.ndarray, int]:
    """``alpha = X G^+ w`` with ``G^+ w`` formed as ``G^+ (G^+ (G w))``.

    A ridge solve applied to ``w`` itself would blow up the part of ``w``
    outside the span by ``1/eps`` and leak it back through roundoff.
    Feeding the solves ``G w`` keeps every right-hand side in the range.
    """
    solve = _solver(state, eps)
    G = state.gram
    Y, r1 = _refine(solve, G, G @ W.T)
    Z, r2 = _refine(solve, G, Y)
    return (X @ Z).T, r1 + r2


def project_onto_span(
    w: np.ndarray,
    X_remain: np.ndarray,
    gram_remain: GramState | None = None,
    ridge_eps: float | None = None,
    return_alpha: bool = False,
) -> ProjectionResult:
    """Orthogonal projection of ``w`` onto ``span{rows of X_remain}``.

    ``w`` may be one vector of length ``d`` or a stack of rows; every row is
    projected independently.  The output is always assembled as
    ``X_remain^T alpha`` so a coordinate that is zero in all remaining rows
    is exactly zero in the result.

    With more remaining rows than feature dimensions the ``d x d`` Gram
    state is used (``gram_remain`` if given, e.g. a Woodbury downdate).
    Otherwise the Gram matrix is singular and the ``r x r`` kernel
    ``X_remain X_remain^T`` is solved instead.
    """
    t0 = time.perf_counter()
    X_remain = np.asarray(X_remain, dtype=np.float64)
    if X_remain.shape[0] == 0:
        raise EmptyRemainingSet("projection onto an empty set of remaining rows")
    w = np.asarray(w, dtype=np.float64)
    W = np.atleast_2d(w)
    r, d = X_remain.shape
    if W.shape[1] != d:
        raise ValueError(f"weight dim {W.shape[1]} != feature dim {d}")
    if r <= d:
        alpha, rounds = _refined_kernel_alpha(W, X_remain, ridge_eps)
        route = "kernel"
    else:
        state = gram_precompute(X_remain) if gram_remain is None else gram_remain
        if ridge_eps is not None:
            eps = float(ridge_eps)
        elif state.ridge_eps is not None:
            eps = state.ridge_eps
        else:
            eps = default_ridge(state.gram)
        alpha, rounds = _refined_gram_alpha(W, X_remain, state, eps)
        route = "gram"
    Wp = alpha @ X_remain
    orth = float(np.linalg.norm(X_remain @ (W - Wp).T))
    return ProjectionResult(
        Wp.reshape(w.shape), orth, time.perf_counter() - t0,
        alpha if return_alpha else None, rounds, route,
    )


def _gram_projection_residuals(V: np.ndarray, state: GramState, eps: float) -> np.ndarray:
    """Row-wise ``||v - G^+ G v||`` in Gram form only (no rows available).

    Eigenvalues at or below ``eps`` count as null.  Without the rows there is
    nothing to annihilate a null component that roundoff lets into a ridge
    solve, so the explicit eigendecomposition is used instead.
    """
    V = np.atleast_2d(V)
    try:
        vals, vecs = np.linalg.eigh(state.gram)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"Gram eigendecomposition failed: {exc}") from None
    basis = vecs[:, vals > eps]
    return np.linalg.norm(V - (V @ basis) @ basis.T, axis=1)


def _row_residuals(V: np.ndarray, X: np.ndarray, ridge_eps: float | None) -> np.ndarray:
    V = np.atleast_2d(V)
    res = project_onto_span(V, X, ridge_eps=ridge_eps)
    return np.linalg.norm(V - res.w_projected, axis=1)


def delta_measure(
    X: np.ndarray,
    mode: str = "leave_one_out_all",
    nodes: np.ndarray | None = None,
    ridge_eps: float | None = None,
) -> float:
    """Worst residual of approximating a row by a combination of other rows.

    ``leave_one_out_all``: max over every row ``i`` of its distance to the
    span of all other rows, using one rank-1 downdate of the full Gram
    matrix per row followed by a symmetric eigendecomposition (or the
    kernel route when ``n - 1 <= d``).
    ``against_set``: max over ``nodes`` of the distance to the span of the
    rows not in ``nodes``.  Empty ``nodes`` gives 0.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if mode == "leave_one_out_all":
        if n < 2:
            raise EmptyRemainingSet("leave-one-out delta needs at least two rows")
        worst = 0.0
        if n - 1 <= d:
            for i in range(n):
                others = np.delete(X, i, axis=0)
                worst = max(worst, float(_row_residuals(X[i], others, ridge_eps)[0]))
            return worst
        full = gram_precompute(X)
        for i in range(n):
            x = X[i]
            st = GramState(_symmetrize(full.gram - np.outer(x, x)), n - 1)
            eps = default_ridge(st.gram) if ridge_eps is None else ridge_eps
            worst = max(worst, float(_gram_projection_residuals(x, st, eps)[0]))
        return worst
    if mode == "against_set":
        sel = np.asarray([] if nodes is None else nodes, dtype=np.int64)
        if sel.size == 0:
            return 0.0
        mask = np.ones(n, dtype=bool)
        mask[sel] = False
        if not mask.any():
            raise EmptyRemainingSet("no remaining rows to approximate against")
        return float(_row_residuals(X[sel], X[mask], ridge_eps).max())
    raise ValueError(f"unknown delta mode {mode!r}")


def span_residual(v: np.ndarray, X: np.ndarray, ridge_eps: float | None = None) -> float:
    """``||v - proj_span(X rows)(v)||``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyRemainingSet("span of an empty row set")
    return float(_row_residuals(np.asarray(v, float).ravel(), X, ridge_eps)[0])


def add_span_noise(X: np.ndarray, scale: float, seed: int = 0) -> np.ndarray:
    """Perturb every row by isotropic Gaussian noise of std ``scale``.

    Optional pre-processing so that a deleted row lying exactly inside the
    span of the others still leaves a distinguishable trace.
    """
    rng = np.random.default_rng(seed)
    return np.asarray(X, float) + scale * rng.standard_normal(np.shape(X))


# -- file formats ---------------------------------------------------------


def read_features(path: str | Path) -> np.ndarray:
    """CSV (comma separated) or the binary format, chosen by file contents."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) >= 4 and struct.unpack("<I", head[:4])[0] == FEATURE_MAGIC:
        return _read_features_bin(path)
    try:
        X = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(X)):
        raise FormatError(f"{path}: non-finite feature values")
    return X


def _read_features_bin(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    _, n, d = struct.unpack("<III", data[:12])
    body = data[12:]
    if len(body) != 8 * n * d:
        raise FormatError(f"{path}: expected {n}x{d} float64 payload, got {len(body)} bytes")
    X = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise FormatError(f"{path}: non-finite feature values")
    return X


def write_features(path: str | Path, X: np.ndarray, binary: bool = False) -> None:
    X = np.asarray(X, dtype=np.float64)
    if binary:
        n, d = X.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<III", FEATURE_MAGIC, n, d))
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_labels(path: str | Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not an integer label") from None
    return np.asarray(out, dtype=np.int64)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for y in np.asarray(labels, dtype=np.int64):
            fh.write(f"{int(y)}\n")


def save_gram(path: str | Path, state: GramState) -> None:
    """Binary dump: magic, d, rows, has_inverse, eps, gram, [inverse]."""
    has_inv = state.inverse is not None
    eps = state.ridge_eps if state.ridge_eps is not None else 0.0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IIIId", GRAM_MAGIC, state.dim, state.source_rows, int(has_inv), eps))
        fh.write(np.ascontiguousarray(state.gram, dtype="<f8").tobytes())
        if has_inv:
            fh.write(np.ascontiguousarray(state.inverse, dtype="<f8").tobytes())


def load_gram(path: str | Path) -> GramState:
    data = Path(path).read_bytes()
    hdr = struct.calcsize("<IIIId")
    if len(data) < hdr:
        raise FormatError(f"{path}: truncated Gram header")
    magic, d, rows, has_inv, eps = struct.unpack("<IIIId", data[:hdr])
    if magic != GRAM_MAGIC:
        raise FormatError(f"{path}: not a Gram state file")
    need = 8 * d * d * (2 if has_inv else 1)
    body = data[hdr:]
    if len(body) != need:
        raise FormatError(f"{path}: payload size mismatch")
    mats = np.frombuffer(body, dtype="<f8").astype(np.float64)
    gram = mats[: d * d].reshape(d, d)
    inv = mats[d * d :].reshape(d, d) if has_inv else None
    return GramState(gram, rows, inv, eps if has_inv else None)
