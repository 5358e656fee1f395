"""Sparse undirected graphs, propagation operators and synthetic CSBM graphs.

Node sets are plain sorted ``int64`` arrays; :func:`node_set` builds and
validates them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyRemainingSet, FormatError

PROPAGATION_MODES = ("row", "symmetric")


def node_set(nodes: Iterable[int] | np.ndarray, num_nodes: int | None = None) -> np.ndarray:
    """Return ``nodes`` as a sorted, deduplicated int64 array.

    Raises ``IndexError`` for indices outside ``[0, num_nodes)`` when the
    node count is known.
    """
    arr = np.unique(np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64))
    if num_nodes is not None and arr.size and (arr[0] < 0 or arr[-1] >= num_nodes):
        raise IndexError(f"node index out of range [0, {num_nodes})")
    return arr


def complement(nodes: np.ndarray, num_nodes: int) -> np.ndarray:
    mask = np.ones(num_nodes, dtype=bool)
    mask[nodes] = False
    return np.flatnonzero(mask).astype(np.int64)


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted graph stored as a symmetric CSR adjacency."""

    adjacency: sp.csr_matrix
    self_loops: bool = False
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        adj = self.adjacency
        if adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if (adj != adj.T).nnz:
            raise ValueError("adjacency must be symmetric")
        if not self.self_loops and adj.diagonal().any():
            raise ValueError("self-loops present but self_loops=False")

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: np.ndarray | Sequence[tuple[int, int]],
        self_loops: bool = False,
        node_ids: np.ndarray | None = None,
    ) -> "Graph":
        """Build from an edge list; duplicates and reversed pairs collapse."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise IndexError("edge endpoint out of range")
        if not self_loops:
            e = e[e[:, 0] != e[:, 1]]
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_matrix(
            (np.ones(rows.size, dtype=np.float64), (rows, cols)), shape=(num_nodes, num_nodes)
        )
        adj.sum_duplicates()
        adj.data[:] = 1.0
        adj.sort_indices()
        return cls(adj, self_loops=self_loops, node_ids=node_ids)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        """Undirected edge count (a self-loop counts once)."""
        loops = int(np.count_nonzero(self.adjacency.diagonal()))
        return (self.adjacency.nnz - loops) // 2 + loops

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.int64)

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as ``(src, dst)`` with ``src <= dst``."""
        coo = sp.triu(self.adjacency).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v] : a.indptr[v + 1]]


@dataclass(frozen=True)
class PropagationMatrix:
    """Degree-normalized adjacency ``D^-1 A`` (row) or ``D^-1/2 A D^-1/2``."""

    matrix: sp.csr_matrix
    mode: str = "row"
    self_loops: bool = False

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def power(self, hops: int) -> sp.csr_matrix:
        """Sparse ``P**hops``; identity for ``hops == 0``."""
        out = sp.identity(self.num_nodes, format="csr")
        for _ in range(hops):
            out = (out @ self.matrix).tocsr()
        return out


def build_propagation(graph: Graph, mode: str = "row", add_self_loops: bool = False) -> PropagationMatrix:
    """Normalize the adjacency of ``graph``.

    Zero-degree nodes get all-zero rows, so their propagated features vanish
    for any positive hop count.
    """
    if mode not in PROPAGATION_MODES:
        raise ValueError(f"unknown propagation mode {mode!r}")
    adj = graph.adjacency.astype(np.float64)
    if add_self_loops:
        adj = (adj + sp.identity(graph.num_nodes, format="csr")).tocsr()
        adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / deg, 0.0)
    if mode == "row":
        mat = sp.diags(inv) @ adj
    else:
        s = np.sqrt(inv)
        mat = sp.diags(s) @ adj @ sp.diags(s)
        # exact symmetry; the two-sided product can differ in the last ulp
        mat = (mat + mat.T) * 0.5
    mat = sp.csr_matrix(mat)
    mat.sort_indices()
    return PropagationMatrix(mat, mode=mode, self_loops=add_self_loops or graph.self_loops)


def propagate(P: PropagationMatrix, X: np.ndarray, hops: int) -> np.ndarray:
    """Return ``P**hops @ X`` by repeated sparse-dense products."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != P.num_nodes:
        raise ValueError(f"feature rows {X.shape[0]} != nodes {P.num_nodes}")
    if hops < 0:
        raise ValueError("hops must be non-negative")
    H = X
    for _ in range(hops):
        H = P.matrix @ H
    return np.array(H, dtype=np.float64, copy=hops == 0)


def multi_hop_features(P: PropagationMatrix, X: np.ndarray, max_hop: int) -> np.ndarray:
    """Concatenate ``[X, PX, ..., P**(max_hop-1) X]`` column-wise."""
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != P.num_nodes:
        raise ValueError(f"feature rows {X.shape[0]} != nodes {P.num_nodes}")
    blocks = [X]
    for _ in range(max_hop - 1):
        blocks.append(P.matrix @ blocks[-1])
    return np.hstack(blocks)


def delete_nodes(graph: Graph, to_delete: Iterable[int]) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on the surviving nodes.

    Returns the new graph and ``index_map`` with ``index_map[old] == new``
    for survivors and ``-1`` for deleted nodes.
    """
    n = graph.num_nodes
    deleted = node_set(to_delete, n)
    if deleted.size == n:
        raise EmptyRemainingSet("cannot delete every node of the graph")
    keep = complement(deleted, n)
    index_map = np.full(n, -1, dtype=np.int64)
    index_map[keep] = np.arange(keep.size)
    sub = graph.adjacency[keep][:, keep].tocsr()
    sub.sort_indices()
    ids = None if graph.node_ids is None else graph.node_ids[keep]
    return Graph(sub, self_loops=graph.self_loops, node_ids=ids), index_map


def affected_set(graph: Graph, deleted: Iterable[int], hops: int) -> np.ndarray:
    """Nodes at shortest-path distance strictly below ``hops`` from a deleted node.

    Multi-source BFS over unit-weight edges; distance 0 means the deleted
    nodes themselves, so ``hops == 1`` returns exactly ``deleted``.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    adj = graph.adjacency
    seen = np.zeros(graph.num_nodes, dtype=bool)
    frontier = node_set(deleted, graph.num_nodes)
    seen[frontier] = True
    for _ in range(hops - 1):
        if frontier.size == 0:
            break
        nbrs = np.unique(adj[frontier].indices)
        frontier = nbrs[~seen[nbrs]]
        seen[frontier] = True
    return np.flatnonzero(seen).astype(np.int64)


@dataclass(frozen=True)
class CsbmParams:
    """Contextual stochastic block model with two classes labelled +1 / -1."""

    n: int
    p: float
    q: float
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    feature_noise_scale: float
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not (0.0 <= self.q <= self.p <= 1.0):
            raise ValueError(f"need 0 <= q <= p <= 1, got p={self.p}, q={self.q}")
        mp, mm = np.asarray(self.mu_plus, float), np.asarray(self.mu_minus, float)
        if mp.shape != mm.shape or mp.ndim != 1:
            raise ValueError("mu_plus and mu_minus must be vectors of equal length")
        if self.feature_noise_scale < 0:
            raise ValueError("feature_noise_scale must be non-negative")
        object.__setattr__(self, "mu_plus", mp)
        object.__setattr__(self, "mu_minus", mm)

    @classmethod
    def symmetric(
        cls, n: int, p: float, q: float, dim: int, separation: float = 1.0,
        noise_scale: float | None = None, seed: int = 0,
    ) -> "CsbmParams":
        """Means at ``+-separation/2`` along the all-ones direction.

        The default noise std ``1/sqrt(dim)`` gives covariance ``I/dim``.
        """
        u = np.ones(dim) / np.sqrt(dim)
        scale = 1.0 / np.sqrt(dim) if noise_scale is None else noise_scale
        return cls(n, p, q, 0.5 * separation * u, -0.5 * separation * u, scale, seed)

    @property
    def dim(self) -> int:
        return self.mu_plus.shape[0]


def generate_csbm(params: CsbmParams) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Sample ``(graph, features, labels)``; labels are +-1, fixed by the seed."""
    rng = np.random.default_rng(params.seed)
    n = params.n
    labels = rng.choice(np.array([-1, 1], dtype=np.int64), size=n)
    src, dst = [], []
    for i in range(n - 1):
        same = labels[i + 1 :] == labels[i]
        prob = np.where(same, params.p, params.q)
        hit = np.flatnonzero(rng.random(n - 1 - i) < prob)
        if hit.size:
            src.append(np.full(hit.size, i, dtype=np.int64))
            dst.append(hit + i + 1)
    edges = (
        np.stack([np.concatenate(src), np.concatenate(dst)], axis=1)
        if src else np.empty((0, 2), dtype=np.int64)
    )
    means = np.where((labels == 1)[:, None], params.mu_plus[None, :], params.mu_minus[None, :])
    X = means + params.feature_noise_scale * rng.standard_normal((n, params.dim))
    return Graph.from_edges(n, edges), X, labels


def read_edge_list(path: str | Path, num_nodes: int | None = None) -> Graph:
    """Parse a ``src<TAB>dst`` file; ``#`` comments and blank lines are skipped.

    Without ``num_nodes`` the count comes from a ``# nodes=N`` header if one
    is present, otherwise from the largest endpoint.
    """
    pairs = []
    header_n = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            head, _, comment = raw.partition("#")
            for tok in comment.split():
                if tok.startswith("nodes=") and tok[6:].isdigit():
                    header_n = int(tok[6:])
            line = head.strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'src<TAB>dst'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if num_nodes is None:
        num_nodes = header_n if header_n is not None else (int(edges.max()) + 1 if edges.size else 0)
    try:
        return Graph.from_edges(num_nodes, edges)
    except IndexError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_edge_list(path: str | Path, graph: Graph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={graph.num_nodes} edges={graph.num_edges}\n")
        for a, b in graph.edge_list():
            fh.write(f"{a}\t{b}\n")
