"""A node-classification problem: graph, raw features, labels and splits."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .graph import Graph, PropagationMatrix, build_propagation, delete_nodes, multi_hop_features, node_set, propagate


@dataclass(frozen=True)
class GraphTask:
    """Everything needed to train a linear GNN on one graph.

    ``hops`` is the propagation depth ``L``; with ``multi_hop`` the model sees
    ``[X, PX, ..., P**(hops-1) X]`` instead of ``P**hops X``.
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_nodes: np.ndarray
    test_nodes: np.ndarray
    mode: str = "row"
    hops: int = 2
    self_loops: bool = False
    multi_hop: bool = False

    def __post_init__(self):
        n = self.graph.num_nodes
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != n:
            raise ValueError(f"features must be {n} x d, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"labels must have length {n}")
        if self.hops < 0 or (self.multi_hop and self.hops < 1):
            raise ValueError("hops out of range")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "train_nodes", node_set(self.train_nodes, n))
        object.__setattr__(self, "test_nodes", node_set(self.test_nodes, n))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def blocks(self) -> int:
        """Number of ``d``-wide hop blocks in the model input."""
        return self.hops if self.multi_hop else 1

    @cached_property
    def propagation(self) -> PropagationMatrix:
        return build_propagation(self.graph, self.mode, self.self_loops)

    @cached_property
    def H(self) -> np.ndarray:
        if self.multi_hop:
            return multi_hop_features(self.propagation, self.features, self.hops)
        return propagate(self.propagation, self.features, self.hops)

    def with_features(self, X: np.ndarray) -> "GraphTask":
        return replace(self, features=X)

    def with_labels(self, labels: np.ndarray) -> "GraphTask":
        return replace(self, labels=labels)

    def without(self, deleted) -> tuple["GraphTask", np.ndarray]:
        """Task on the induced subgraph, plus the old-to-new index map (-1 = gone)."""
        deleted = node_set(deleted, self.num_nodes)
        g, index_map = delete_nodes(self.graph, deleted)
        keep = index_map >= 0

        def remap(nodes):
            return index_map[nodes[keep[nodes]]]

        reduced = GraphTask(
            g, self.features[keep], self.labels[keep], remap(self.train_nodes), remap(self.test_nodes),
            self.mode, self.hops, self.self_loops, self.multi_hop,
        )
        return reduced, index_map


def random_split(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(train_fraction * n)))
    return np.sort(perm[:k]), np.sort(perm[k:])
