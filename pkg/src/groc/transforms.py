"""View transformations: stochastic (masking, random edge removal) and adversarial.

A view is itself a :class:`~groc.graph.Graph` (masked features, edited edge
list); a :class:`ViewDelta` records how it was derived from its source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, ReceptiveField, degree_centrality

MAX_DROP_PROB = 0.95


@dataclass(frozen=True)
class StochasticConfig:
    p1: float = 0.3
    p2: float = 0.4
    q_minus1: float = 0.2
    q_minus2: float = 0.4
    removal_scheme: str = "uniform"
    mask_axis: str = "column"

    def __post_init__(self):
        for name in ("p1", "p2", "q_minus1", "q_minus2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.removal_scheme not in ("uniform", "degree"):
            raise ValueError(f"unknown removal scheme {self.removal_scheme!r}")
        if self.mask_axis not in ("column", "entry"):
            raise ValueError(f"unknown mask axis {self.mask_axis!r}")


@dataclass(frozen=True)
class AdversarialConfig:
    q_plus1: float = 0.0
    q_plus2: float = 0.0
    batch_size: int = 10

    def __post_init__(self):
        for name in ("q_plus1", "q_plus2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ViewDelta:
    masked_dims: list[int] = field(default_factory=list)
    masked_cells: list[tuple[int, int]] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)
    inserted: list[tuple[int, int, float]] = field(default_factory=list)

    def merge(self, other: "ViewDelta") -> "ViewDelta":
        return ViewDelta(self.masked_dims + other.masked_dims,
                         self.masked_cells + other.masked_cells,
                         self.removed + other.removed,
                         self.inserted + other.inserted)

    def to_json(self) -> str:
        return json.dumps({
            "masked_dims": self.masked_dims,
            "masked_cells": [list(c) for c in self.masked_cells],
            "removed": self.removed,
            "inserted": [list(e) for e in self.inserted],
        }, sort_keys=True)


def _count(rate: float, size: int) -> int:
    # guard against 0.29 * 100 == 28.999...
    return min(size, int(np.floor(rate * size + 1e-9)))


def mask_features(x: np.ndarray, p: float, rng: np.random.Generator,
                  axis: str = "column") -> tuple[np.ndarray, ViewDelta]:
    """Zero each feature dimension (or each entry, ``axis="entry"``) with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    x = np.array(x, dtype=np.float64)
    if axis == "column":
        hit = rng.random(x.shape[1]) < p
        x[:, hit] = 0.0
        return x, ViewDelta(masked_dims=np.flatnonzero(hit).tolist())
    hit = rng.random(x.shape) < p
    x[hit] = 0.0
    return x, ViewDelta(masked_cells=[tuple(c) for c in np.argwhere(hit).tolist()])


def removal_probabilities(g: Graph, q: float, scheme: str) -> np.ndarray:
    """Per-edge removal probability for the uniform or degree-weighted scheme.

    Degree-weighted probabilities are proportional to the inverse edge
    centrality, scaled so they sum to ``q * |E|`` and clamped to ``[0, 0.95]``.
    """
    if g.num_edges == 0:
        return np.zeros(0)
    if scheme == "uniform":
        return np.full(g.num_edges, q)
    if scheme != "degree":
        raise ValueError(f"unknown removal scheme {scheme!r}")
    inv = 1.0 / degree_centrality(g)
    prob = inv * (q * g.num_edges / inv.sum())
    return np.clip(prob, 0.0, MAX_DROP_PROB)


def drop_edges_stochastic(g: Graph, q: float, scheme: str,
                          rng: np.random.Generator) -> tuple[Graph, ViewDelta]:
    if not 0 <= q < 1:
        raise ValueError("q must lie in [0, 1)")
    prob = removal_probabilities(g, q, scheme)
    drop = rng.random(g.num_edges) < prob
    keep = ~drop
    view = g.replace(edges=g.edges[keep], weights=g.weights[keep])
    return view, ViewDelta(removed=np.flatnonzero(drop).tolist())


def build_candidate_sets(anchors, fields: dict[int, ReceptiveField],
                         g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Removal candidates (edge ids) and insertion candidates (node pairs).

    Insertion pairs join an anchor to every node in the union of the anchors'
    fields that is outside the anchor's own field; pairs are canonical
    ``u < v``, unique, sorted, and never existing edges.
    """
    anchors = [int(a) for a in anchors]
    if not anchors:
        raise ValueError("empty anchor set")
    removal: set[int] = set()
    union: set[int] = set()
    for v in anchors:
        removal |= fields[v].edges
        union |= fields[v].nodes
    n = g.num_nodes
    existing = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())
    keys: set[int] = set()
    for v in anchors:
        for u in union - fields[v].nodes:
            a, b = (u, v) if u < v else (v, u)
            key = a * n + b
            if key not in existing:
                keys.add(key)
    ordered = np.array(sorted(keys), dtype=np.int64)
    s_plus = np.column_stack([ordered // n, ordered % n]) if len(ordered) else np.empty((0, 2), np.int64)
    return np.array(sorted(removal), dtype=np.int64), s_plus


def rank_select(scores: np.ndarray, count: int, largest: bool) -> np.ndarray:
    """Positions of the ``count`` smallest (or largest) scores, ties by position."""
    pos = np.arange(len(scores))
    key = -scores if largest else scores
    return np.lexsort((pos, key))[:count]


def apply_adversarial(view: Graph, edge_grad: np.ndarray, cand_grad: np.ndarray,
                      s_minus: np.ndarray, s_plus: np.ndarray, q_minus: float,
                      q_plus: float) -> tuple[Graph, ViewDelta]:
    """Remove the lowest-gradient removal candidates and insert the highest-gradient pairs.

    ``edge_grad`` is indexed by edge id of ``view``; ``cand_grad`` is aligned
    with the rows of ``s_plus``. Inserted edges get weight 1.
    """
    s_minus = np.asarray(s_minus, dtype=np.int64)
    n_remove = _count(q_minus, len(s_minus))
    n_insert = _count(q_plus, len(s_plus))
    removed = np.sort(s_minus[rank_select(edge_grad[s_minus], n_remove, largest=False)])
    chosen = np.sort(rank_select(np.asarray(cand_grad), n_insert, largest=True))
    keep = np.ones(view.num_edges, bool)
    keep[removed] = False
    new_pairs = np.asarray(s_plus, dtype=np.int64).reshape(-1, 2)[chosen]
    edges = np.concatenate([view.edges[keep], new_pairs])
    weights = np.concatenate([view.weights[keep], np.ones(len(new_pairs))])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    out = view.replace(edges=edges[order], weights=weights[order])
    delta = ViewDelta(removed=removed.tolist(),
                      inserted=[(int(u), int(v), 1.0) for u, v in new_pairs.tolist()])
    return out, delta
