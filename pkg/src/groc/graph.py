"""Graph container, preprocessing, receptive fields, SBM fixtures and on-disk I/O."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed graph input."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with binary node features.

    Edges are stored once, canonicalized with ``u < v`` and sorted
    lexicographically; an edge id is its position in that list.
    """

    num_nodes: int
    features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    labels: np.ndarray | None = None
    splits: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        n = self.num_nodes
        if n <= 0:
            raise GraphError("graph must have at least one node")
        if self.features.shape[0] != n:
            raise GraphError("feature rows must equal num_nodes")
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2 or len(self.weights) != len(e):
            raise GraphError("edges must be an (E, 2) array with one weight per edge")
        if len(e):
            if np.any(e[:, 0] >= e[:, 1]) or e.min() < 0 or e.max() >= n:
                raise GraphError("edges must satisfy 0 <= u < v < n")
            keys = e[:, 0] * n + e[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise GraphError("edges must be sorted and free of duplicates")
            if np.any(self.weights <= 0) or np.any(self.weights > 1):
                raise GraphError("edge weights must lie in (0, 1]")
        if not np.all((self.features == 0) | (self.features == 1)):
            raise GraphError("features must be binary")
        if self.labels is not None and len(self.labels) != n:
            raise GraphError("labels must have one entry per node")
        if self.splits is not None:
            seen: set[int] = set()
            for part in self.splits:
                ids = set(int(i) for i in part)
                if len(ids) != len(part) or ids & seen:
                    raise GraphError("split sets must be disjoint")
                if ids and (min(ids) < 0 or max(ids) >= n):
                    raise GraphError("split ids out of range")
                seen |= ids
        for arr in (self.features, self.edges, self.weights):
            _frozen(arr)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise GraphError("graph has no labels")
        return int(self.labels.max()) + 1

    def degrees(self) -> np.ndarray:
        """Unweighted degree of every node."""
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric weighted adjacency (no self-loops) as CSR."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.concatenate([self.weights, self.weights])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def neighbors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR index ``(indptr, nbr, edge_id)`` over both edge orientations."""
        n = self.num_nodes
        ids = np.arange(self.num_edges)
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        eid = np.concatenate([ids, ids])
        order = np.lexsort((dst, src))
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return np.cumsum(indptr), dst[order], eid[order]

    def edge_lookup(self) -> dict[tuple[int, int], int]:
        return {(int(u), int(v)): i for i, (u, v) in enumerate(self.edges)}

    def replace(self, *, features=None, edges=None, weights=None) -> "Graph":
        """Copy with new features and/or edge list (already canonical)."""
        if edges is not None and weights is None:
            weights = np.ones(len(edges))
        return Graph(
            self.num_nodes,
            np.array(self.features if features is None else features, dtype=np.float64),
            np.array(self.edges if edges is None else edges, dtype=np.int64).reshape(-1, 2),
            np.array(self.weights if weights is None else weights, dtype=np.float64),
            self.labels,
            self.splits,
        )


def canonical_edges(pairs, weights=None, num_nodes: int | None = None):
    """Symmetrize, drop self-loops, dedupe and sort an edge list.

    Duplicate pairs keep the largest weight.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=np.float64)
    if num_nodes is not None and len(pairs) and (pairs.min() < 0 or pairs.max() >= num_nodes):
        raise GraphError("edge endpoint out of range")
    keep = pairs[:, 0] != pairs[:, 1]
    pairs, w = pairs[keep], w[keep]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    best: dict[tuple[int, int], float] = {}
    for a, b, x in zip(lo.tolist(), hi.tolist(), w.tolist()):
        key = (a, b)
        if key not in best or x > best[key]:
            best[key] = x
    keys = sorted(best)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    return edges, np.array([best[k] for k in keys], dtype=np.float64)


def preprocess(features, edges: Iterable = (), labels=None, splits=None) -> Graph:
    """Binarize features (x > 0) and turn ``edges`` into an undirected simple graph.

    ``features`` may also be an existing :class:`Graph`, in which case it is
    re-canonicalized (the operation is idempotent). Edges are pairs ``(u, v)``
    or triples ``(u, v, w)``.
    """
    if isinstance(features, Graph):
        g = features
        return preprocess(
            g.features,
            np.column_stack([g.edges, g.weights]) if g.num_edges else (),
            g.labels,
            g.splits,
        )
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise GraphError("empty graph")
    if not np.all(np.isfinite(x)):
        raise GraphError("non-finite feature values")
    n = x.shape[0]
    raw = [tuple(e) for e in edges]
    if raw and len(raw[0]) == 3:
        arr = np.array(raw, dtype=np.float64)
        pairs, w = arr[:, :2].astype(np.int64), arr[:, 2]
    else:
        pairs, w = np.array(raw, dtype=np.int64).reshape(-1, 2), None
    e, w = canonical_edges(pairs, w, num_nodes=n)
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    spl = None
    if splits is not None:
        spl = tuple(np.asarray(sorted(int(i) for i in s), dtype=np.int64) for s in splits)
        if len(spl) != 3:
            raise GraphError("splits must be (train, val, test)")
    return Graph(n, (x > 0).astype(np.float64), e, w, lab, spl)


@dataclass(frozen=True)
class ReceptiveField:
    center: int
    nodes: frozenset[int]
    edges: frozenset[int]


def bfs_distances(g: Graph, source: int, max_hops: int | None = None) -> dict[int, int]:
    indptr, nbr, _ = g.neighbors()
    return _bfs(indptr, nbr, source, max_hops)


def _bfs(indptr, nbr, source, max_hops):
    dist = {source: 0}
    queue = deque([source])
    while queue:
        x = queue.popleft()
        d = dist[x]
        if max_hops is not None and d >= max_hops:
            continue
        for y in nbr[indptr[x]:indptr[x + 1]].tolist():
            if y not in dist:
                dist[y] = d + 1
                queue.append(y)
    return dist


def receptive_fields(g: Graph, hops: int) -> dict[int, ReceptiveField]:
    """Nodes within ``hops`` of each node and the edges that reach it.

    An edge belongs to the field of ``v`` when one of its endpoints is at
    distance at most ``hops - 1`` from ``v``; these are exactly the edges whose
    weights influence ``v`` in a ``hops``-layer message-passing encoder.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    indptr, nbr, eid = g.neighbors()
    out = {}
    for v in range(g.num_nodes):
        dist = _bfs(indptr, nbr, v, hops)
        edges = set()
        for x, d in dist.items():
            if d <= hops - 1:
                edges.update(eid[indptr[x]:indptr[x + 1]].tolist())
        out[v] = ReceptiveField(v, frozenset(dist), frozenset(edges))
    return out


def sbm_generate(
    seed: int,
    block_sizes: Sequence[int],
    p_in: float,
    p_out: float,
    flip_prob: float = 0.05,
    feature_copies: int = 1,
    train_per_class: int = 20,
    val_fraction: float = 0.2,
) -> Graph:
    """Two-parameter stochastic block model with noisy one-hot block features.

    Features are the one-hot block id repeated ``feature_copies`` times, each
    bit flipped independently with probability ``flip_prob``.

    Each block keeps ``min(train_per_class, size // 5)`` (at least one) nodes
    for training, a ``val_fraction`` share of the rest for validation, and the
    remainder for testing.
    """
    sizes = [int(s) for s in block_sizes]
    if sum(sizes) <= 0 or min(sizes) < 0:
        raise GraphError("block sizes must be non-negative and sum to > 0")
    if not (0 <= p_out <= p_in <= 1):
        raise GraphError("need 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng(seed)
    n, k = sum(sizes), len(sizes)
    labels = np.repeat(np.arange(k), sizes)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.column_stack([iu[hit], ju[hit]]).astype(np.int64)
    if feature_copies < 1:
        raise GraphError("feature_copies must be >= 1")
    onehot = np.tile(np.eye(k)[labels], (1, feature_copies))
    flips = rng.random(onehot.shape) < flip_prob
    features = np.logical_xor(onehot > 0, flips).astype(np.float64)

    train, val, test = [], [], []
    for c in range(k):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = max(1, min(train_per_class, len(members) // 5)) if len(members) else 0
        rest = members[n_train:]
        n_val = int(round(val_fraction * len(rest)))
        train += members[:n_train].tolist()
        val += rest[:n_val].tolist()
        test += rest[n_val:].tolist()
    splits = tuple(np.array(sorted(s), dtype=np.int64) for s in (train, val, test))
    return Graph(n, features, edges, np.ones(len(edges)), labels.astype(np.int64), splits)


def degree_centrality(g: Graph) -> np.ndarray:
    """Per-edge centrality ``(deg(u) + deg(v)) / 2`` from unweighted degrees."""
    deg = g.degrees()
    return (deg[g.edges[:, 0]] + deg[g.edges[:, 1]]) / 2.0


# ---------------------------------------------------------------------------
# directory format


def save_graph(g: Graph, path: str | Path) -> None:
    """Write ``features.csv``, ``edges.csv`` and, if present, labels and splits.

    Edge weights are not stored; the format describes unweighted graphs.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "features.csv", "w") as fh:
        for row in g.features.astype(np.int64):
            fh.write(",".join(map(str, row.tolist())) + "\n")
    with open(path / "edges.csv", "w") as fh:
        for u, v in g.edges.tolist():
            fh.write(f"{u},{v}\n")
    if g.labels is not None:
        with open(path / "labels.csv", "w") as fh:
            fh.writelines(f"{c}\n" for c in g.labels.tolist())
    if g.splits is not None:
        names = ("train", "val", "test")
        payload = {k: s.tolist() for k, s in zip(names, g.splits)}
        (path / "splits.json").write_text(json.dumps(payload) + "\n")


def load_graph(path: str | Path) -> Graph:
    path = Path(path)
    if not (path / "features.csv").exists() or not (path / "edges.csv").exists():
        raise GraphError(f"{path} is not a graph directory")
    features = np.loadtxt(path / "features.csv", delimiter=",", ndmin=2)
    edge_text = (path / "edges.csv").read_text().split()
    edges = [tuple(int(x) for x in line.split(",")[:2]) for line in edge_text]
    labels = None
    if (path / "labels.csv").exists():
        labels = np.loadtxt(path / "labels.csv", dtype=np.int64, ndmin=1)
    splits = None
    if (path / "splits.json").exists():
        raw = json.loads((path / "splits.json").read_text())
        splits = [raw[k] for k in ("train", "val", "test")] if isinstance(raw, dict) else raw
    return preprocess(features, edges, labels, splits)
