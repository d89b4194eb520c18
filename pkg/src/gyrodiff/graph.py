from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Undirected graph with categorical node and edge types.

    ``edges`` holds (i, j, etype) with i < j and etype >= 1; type 0 means
    "no edge" and is never stored. Instances are hashable and compare by value.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...] = ()
    y_graph: Optional[float | int] = None
    y_nodes: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        nodes = tuple(int(t) for t in self.nodes)
        if len(nodes) < 1:
            raise ValueError("a graph needs at least one node")
        n = len(nodes)
        seen = set()
        edges = []
        for e in self.edges:
            i, j, t = (int(v) for v in e)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if i > j:
                i, j = j, i
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
            if t < 1:
                raise ValueError(f"edge type must be >= 1, got {t}")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
            edges.append((i, j, t))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(sorted(edges)))
        if self.y_nodes is not None:
            yn = tuple(int(v) for v in self.y_nodes)
            if len(yn) != n:
                raise ValueError("y_nodes length differs from node count")
            object.__setattr__(self, "y_nodes", yn)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @cached_property
    def edge_type(self) -> np.ndarray:
        E = np.zeros((self.n, self.n), dtype=np.int64)
        for i, j, t in self.edges:
            E[i, j] = E[j, i] = t
        return E

    @cached_property
    def adjacency(self) -> np.ndarray:
        return (self.edge_type > 0).astype(np.int64)

    @classmethod
    def from_dense(cls, node_type: Sequence[int], edge_type, y_graph=None, y_nodes=None) -> "Graph":
        E = np.asarray(edge_type)
        n = len(node_type)
        edges = [(i, j, int(E[i, j])) for i in range(n) for j in range(i + 1, n) if E[i, j] > 0]
        return cls(tuple(node_type), tuple(edges), y_graph, y_nodes)

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        nodes = tuple(self.nodes[p] for p in perm)
        edges = tuple((inv[i], inv[j], t) for i, j, t in self.edges)
        yn = None if self.y_nodes is None else tuple(self.y_nodes[p] for p in perm)
        return Graph(nodes, edges, self.y_graph, yn)

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        adj = [[] for _ in range(self.n)]
        for i, j, _ in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n
