"""Desk-scale datasets: valence-grammar graphs, SBM node classification, JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph

NODE_NAMES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class GrammarSpec:
    valences: tuple[int, ...] = (1, 2, 3, 4)
    bond_orders: tuple[int, ...] = (0, 1, 2)  # indexed by edge type
    min_nodes: int = 4
    max_nodes: int = 12
    type_weights: tuple[float, ...] = (0.3, 0.3, 0.25, 0.15)

    @property
    def num_node_types(self) -> int:
        return len(self.valences)

    @property
    def num_edge_types(self) -> int:
        return len(self.bond_orders)


def bond_order_sums(G: Graph, spec: GrammarSpec) -> np.ndarray:
    tot = np.zeros(G.n, dtype=np.int64)
    for i, j, t in G.edges:
        if t >= len(spec.bond_orders):
            return None
        tot[i] += spec.bond_orders[t]
        tot[j] += spec.bond_orders[t]
    return tot


def is_valid(G: Graph, spec: GrammarSpec = GrammarSpec()) -> bool:
    """Connected and every node's incident bond order equals its valence exactly."""
    if any(t < 0 or t >= len(spec.valences) for t in G.nodes):
        return False
    tot = bond_order_sums(G, spec)
    if tot is None:
        return False
    val = np.asarray([spec.valences[t] for t in G.nodes])
    return bool(np.array_equal(tot, val)) and G.is_connected()


def _try_assemble(rng: np.random.Generator, spec: GrammarSpec):
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    p = np.asarray(spec.type_weights, dtype=float)
    types = rng.choice(len(spec.valences), size=n, p=p / p.sum())
    cap = np.asarray([spec.valences[t] for t in types], dtype=np.int64)
    if cap.sum() % 2 or cap.sum() < 2 * (n - 1):
        return None
    order = rng.permutation(n)
    bonds = {}
    # random spanning tree: attach each node to an earlier one with spare capacity
    for k in range(1, n):
        u = order[k]
        cands = [order[a] for a in range(k) if cap[order[a]] > 0]
        if not cands or cap[u] == 0:
            return None
        v = cands[int(rng.integers(len(cands)))]
        bonds[(min(u, v), max(u, v))] = 1
        cap[u] -= 1
        cap[v] -= 1
    # saturate remaining valence with extra single bonds or single->double upgrades
    max_order = max(spec.bond_orders)
    while cap.sum() > 0:
        open_nodes = np.flatnonzero(cap > 0)
        moves = []
        for a in range(len(open_nodes)):
            for c in range(a + 1, len(open_nodes)):
                i, j = int(open_nodes[a]), int(open_nodes[c])
                if bonds.get((i, j), 0) < max_order:
                    moves.append((i, j))
        if not moves:
            return None
        i, j = moves[int(rng.integers(len(moves)))]
        bonds[(i, j)] = bonds.get((i, j), 0) + 1
        cap[i] -= 1
        cap[j] -= 1
    edge_of_order = {o: t for t, o in enumerate(spec.bond_orders) if o > 0}
    edges = tuple((i, j, edge_of_order[o]) for (i, j), o in bonds.items())
    return Graph(tuple(int(t) for t in types), edges)


def gen_valence_graphs(count: int, spec: GrammarSpec = GrammarSpec(), seed: int = 0) -> list[Graph]:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        G = _try_assemble(rng, spec)
        if G is not None and is_valid(G, spec):
            out.append(G)
    return out


def gen_sbm(
    n_per_block: int = 30,
    blocks: int = 3,
    p_in: float = 0.3,
    p_out: float = 0.02,
    seed: int = 0,
    flip: float = 0.1,
) -> Graph:
    """Stochastic block model graph; node types are block ids corrupted with prob ``flip``."""
    if not p_in > p_out:
        raise ValueError("p_in must exceed p_out")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(blocks), n_per_block)
    n = labels.size
    probs = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    draws = rng.random((n, n))
    iu = np.triu_indices(n, 1)
    keep = draws[iu] < probs[iu]
    edges = tuple((int(i), int(j), 1) for i, j in zip(iu[0][keep], iu[1][keep]))
    feats = labels.copy()
    flips = rng.random(n) < flip
    for v in np.flatnonzero(flips):
        others = [b for b in range(blocks) if b != labels[v]]
        feats[v] = others[int(rng.integers(len(others)))]
    return Graph(tuple(int(t) for t in feats), edges, None, tuple(int(v) for v in labels))


def uniform_random_graphs(sizes, num_node_types: int, num_edge_types: int, seed: int = 0) -> list[Graph]:
    """Reference graphs drawn uniformly given their sizes.

    Node types are uniform over ``num_node_types``; every unordered pair takes
    one of ``num_edge_types`` states (0 = absent) uniformly.
    """
    rng = np.random.default_rng(seed)
    out = []
    for n in sizes:
        n = int(n)
        nodes = tuple(int(t) for t in rng.integers(0, num_node_types, n))
        iu = np.triu_indices(n, 1)
        types = rng.integers(0, num_edge_types, iu[0].size)
        edges = tuple((int(i), int(j), int(t)) for i, j, t in zip(iu[0], iu[1], types) if t)
        out.append(Graph(nodes, edges))
    return out


def count_triangles(G: Graph) -> int:
    A = G.adjacency
    return int(np.trace(A @ A @ A)) // 6


def regression_target(G: Graph, spec: GrammarSpec = GrammarSpec()) -> float:
    """#triangles + 0.5 #type-C nodes - 0.25 #double bonds."""
    n_c = sum(1 for t in G.nodes if t == 2)
    double_t = spec.bond_orders.index(2)
    n_double = sum(1 for _, _, t in G.edges if t == double_t)
    return 1.0 * count_triangles(G) + 0.5 * n_c - 0.25 * n_double


def with_regression_targets(graphs: list[Graph], spec: GrammarSpec = GrammarSpec()) -> list[Graph]:
    return [Graph(g.nodes, g.edges, regression_target(g, spec), g.y_nodes) for g in graphs]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int = 0


def split_indices(n: int, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tr = tuple(sorted(int(i) for i in perm[:n_train]))
    va = tuple(sorted(int(i) for i in perm[n_train : n_train + n_val]))
    te = tuple(sorted(int(i) for i in perm[n_train + n_val :]))
    return DatasetSplit(tr, va, te, seed)


class DatasetFormatError(ValueError):
    pass


def graph_to_json(G: Graph) -> str:
    rec = {
        "nodes": list(G.nodes),
        "edges": [list(e) for e in G.edges],
        "y_graph": G.y_graph,
        "y_nodes": None if G.y_nodes is None else list(G.y_nodes),
    }
    return json.dumps(rec, separators=(",", ":"))


def graph_from_json(line: str) -> Graph:
    rec = json.loads(line)
    if not isinstance(rec, dict) or "nodes" not in rec or "edges" not in rec:
        raise ValueError("record must be an object with 'nodes' and 'edges'")
    for e in rec["edges"]:
        if len(e) != 3:
            raise ValueError(f"edge {e!r} must be [i, j, etype]")
        i, j, _ = e
        if i >= j:
            raise ValueError(f"edge {e!r} must satisfy i < j")
    y = rec.get("y_graph")
    if y is not None and (isinstance(y, bool) or not isinstance(y, (int, float))):
        raise ValueError("y_graph must be a number or null")
    return Graph(tuple(rec["nodes"]), tuple(tuple(e) for e in rec["edges"]), y, rec.get("y_nodes"))


def save_jsonl(graphs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for G in graphs:
            fh.write(graph_to_json(G) + "\n")


def load_jsonl(path) -> list[Graph]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(graph_from_json(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_manifest(path, **info) -> None:
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
