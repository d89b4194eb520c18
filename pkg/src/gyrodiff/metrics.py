"""Generation metrics (validity, uniqueness, novelty, graph-statistics MMD) and prediction metrics."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .datasets import GrammarSpec, is_valid
from .graph import Graph

MAX_KEY_NODES = 12


class UnsupportedSizeError(ValueError):
    pass


@dataclass
class GenReport:
    validity: float
    uniqueness: float
    novelty: float
    mmd_degree: float
    mmd_clustering: float
    count: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            row = asdict(self)
            wr.writerow(list(row))
            wr.writerow([repr(v) for v in row.values()])


def validity(graphs: Sequence[Graph], spec: GrammarSpec = GrammarSpec()) -> float:
    if not graphs:
        return 0.0
    return sum(is_valid(g, spec) for g in graphs) / len(graphs)


def _digest(obj) -> str:
    return hashlib.blake2b(repr(obj).encode(), digest_size=16).hexdigest()


def _neighbors(G: Graph):
    adj = [[] for _ in range(G.n)]
    for i, j, t in G.edges:
        adj[i].append((j, t))
        adj[j].append((i, t))
    return adj


def wl_colors(G: Graph) -> list[int]:
    """1-WL refinement over (node type, multiset of (edge type, neighbor color)) until stable.

    Colors are canonical: they are ranks of the sorted signatures, so two
    isomorphic graphs get identical color multisets.
    """
    adj = _neighbors(G)
    sigs = [(t,) for t in G.nodes]
    colors = _rank(sigs)
    for _ in range(G.n):
        sigs = [(colors[v], tuple(sorted((t, colors[u]) for u, t in adj[v]))) for v in range(G.n)]
        new = _rank(sigs)
        if len(set(new)) == len(set(colors)):
            colors = new
            break
        colors = new
    return colors


def _rank(sigs):
    order = {s: k for k, s in enumerate(sorted(set(sigs)))}
    return [order[s] for s in sigs]


def canonical_key(G: Graph) -> str:
    """Isomorphism-invariant 1-WL fingerprint.

    Non-isomorphic graphs can share a key; uniqueness and novelty resolve
    such collisions with ``is_isomorphic``.
    """
    if G.n > MAX_KEY_NODES:
        raise UnsupportedSizeError(f"canonical_key supports at most {MAX_KEY_NODES} nodes, got {G.n}")
    adj = _neighbors(G)
    sigs = [(G.nodes[v],) for v in range(G.n)]
    history = []
    for _ in range(G.n + 1):
        history.append(tuple(sorted(sigs)))
        hashed = [_digest(s) for s in sigs]
        nxt = [(hashed[v], tuple(sorted((t, hashed[u]) for u, t in adj[v]))) for v in range(G.n)]
        if len(set(nxt)) == len(set(sigs)):
            history.append(tuple(sorted(nxt)))
            break
        sigs = nxt
    return _digest((G.n, len(G.edges), tuple(history)))


def is_isomorphic(g1: Graph, g2: Graph) -> bool:
    """Exact typed-graph isomorphism by backtracking over WL-compatible candidates."""
    if g1.n != g2.n or len(g1.edges) != len(g2.edges):
        return False
    if sorted(g1.nodes) != sorted(g2.nodes):
        return False
    if sorted(t for *_, t in g1.edges) != sorted(t for *_, t in g2.edges):
        return False
    # refine both graphs jointly so colors are comparable across them
    n = g1.n
    union = Graph(
        g1.nodes + g2.nodes,
        g1.edges + tuple((i + n, j + n, t) for i, j, t in g2.edges),
    )
    col = wl_colors(union)
    c1, c2 = col[:n], col[n:]
    if sorted(c1) != sorted(c2):
        return False
    E1, E2 = g1.edge_type, g2.edge_type
    order = sorted(range(n), key=lambda v: (sum(1 for u in range(n) if c1[u] == c1[v]), -int((E1[v] > 0).sum())))
    mapping = [-1] * n
    used = [False] * n

    def extend(k):
        if k == n:
            return True
        v = order[k]
        for w in range(n):
            if used[w] or c2[w] != c1[v]:
                continue
            ok = True
            for kk in range(k):
                u = order[kk]
                if E1[v, u] != E2[w, mapping[u]]:
                    ok = False
                    break
            if not ok:
                continue
            mapping[v] = w
            used[w] = True
            if extend(k + 1):
                return True
            used[w] = False
            mapping[v] = -1
        return False

    return extend(0)


class IsomorphismIndex:
    """Groups graphs into exact isomorphism classes using the WL key as a bucket."""

    def __init__(self, graphs: Iterable[Graph] = ()):
        self._buckets: dict[str, list[Graph]] = {}
        for g in graphs:
            self.add(g)

    def find(self, G: Graph):
        for rep in self._buckets.get(canonical_key(G), []):
            if is_isomorphic(G, rep):
                return rep
        return None

    def add(self, G: Graph) -> bool:
        """Insert ``G``; returns True if it opened a new class."""
        key = canonical_key(G)
        bucket = self._buckets.setdefault(key, [])
        for rep in bucket:
            if is_isomorphic(G, rep):
                return False
        bucket.append(G)
        return True

    def __contains__(self, G: Graph) -> bool:
        return self.find(G) is not None

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())


def uniqueness(valid_graphs: Sequence[Graph]) -> float:
    if not valid_graphs:
        return 0.0
    idx = IsomorphismIndex()
    distinct = sum(idx.add(g) for g in valid_graphs)
    return distinct / len(valid_graphs)


def novelty(valid_graphs: Sequence[Graph], train_graphs: Sequence[Graph]) -> float:
    if not valid_graphs:
        return 0.0
    idx = train_graphs if isinstance(train_graphs, IsomorphismIndex) else IsomorphismIndex(train_graphs)
    return sum(g not in idx for g in valid_graphs) / len(valid_graphs)


def degree_histogram(G: Graph, bins: int = 5) -> np.ndarray:
    deg = np.minimum(G.adjacency.sum(1), bins - 1)
    return np.bincount(deg, minlength=bins) / G.n


def clustering_coefficients(G: Graph) -> np.ndarray:
    A = G.adjacency
    deg = A.sum(1)
    tri = np.diag(A @ A @ A) / 2.0
    pairs = deg * (deg - 1) / 2.0
    return np.where(pairs > 0, tri / np.maximum(pairs, 1), 0.0)


def clustering_histogram(G: Graph, bins: int = 10) -> np.ndarray:
    h, _ = np.histogram(clustering_coefficients(G), bins=bins, range=(0.0, 1.0))
    return h / G.n


def _gaussian_mmd(X: np.ndarray, Y: np.ndarray) -> float:
    Z = np.concatenate([X, Y])
    D2 = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
    iu = np.triu_indices(len(Z), 1)
    med = np.median(np.sqrt(D2[iu])) if len(iu[0]) else 0.0
    sigma = med if med > 0 else 1.0
    K = np.exp(-D2 / (2 * sigma**2))
    n = len(X)
    kxx = K[:n, :n].mean()
    kyy = K[n:, n:].mean()
    kxy = K[:n, n:].mean()
    return float(max(kxx + kyy - 2 * kxy, 0.0))


def mmd_stats(set_a: Sequence[Graph], set_b: Sequence[Graph]) -> tuple[float, float]:
    """Squared MMD (Gaussian kernel, median-distance bandwidth) of degree and clustering histograms."""
    if not set_a or not set_b:
        raise ValueError("mmd_stats needs two non-empty graph sets")
    da = np.array([degree_histogram(g) for g in set_a])
    db = np.array([degree_histogram(g) for g in set_b])
    ca = np.array([clustering_histogram(g) for g in set_a])
    cb = np.array([clustering_histogram(g) for g in set_b])
    return _gaussian_mmd(da, db), _gaussian_mmd(ca, cb)


def gen_report(generated: Sequence[Graph], train: Sequence[Graph], spec: GrammarSpec = GrammarSpec()) -> GenReport:
    valid = [g for g in generated if is_valid(g, spec)]
    v = len(valid) / len(generated) if generated else 0.0
    u = uniqueness(valid)
    nov = novelty(valid, train)
    if generated:
        md, mc = mmd_stats(train, generated)
    else:
        md = mc = float("nan")
    return GenReport(v, u, nov, md, mc, len(generated))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("accuracy: length mismatch")
    return float((preds == labels).mean())


def mae(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("mae: length mismatch")
    return float(np.abs(preds - targets).mean())
