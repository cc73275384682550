"""Cosine similarity, per-node contrastive loss and the symmetric objective.

Negatives for an anchor are the other anchors in both views; with every node
as an anchor this is the full-graph objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def cosine_sim(a, b) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _directional_losses(h_a: ad.Var, h_b: ad.Var, t: float) -> ad.Var:
    """Per-anchor loss with view ``a`` as the query side; returns a vector."""
    na, nb = ad.row_normalize(h_a), ad.row_normalize(h_b)
    k = na.value.shape[0]
    between = ad.scale(ad.matmul(na, ad.transpose(nb)), 1.0 / t)
    within = ad.scale(ad.matmul(na, ad.transpose(na)), 1.0 / t)
    mask = np.concatenate([np.ones((k, k), bool), ~np.eye(k, dtype=bool)], axis=1)
    denom = ad.logsumexp_rows(ad.concat_cols(between, within), mask=mask)
    return ad.sub(denom, ad.diag(between))


def node_losses(h1: ad.Var, h2: ad.Var, anchors, cfg: SimilarityConfig) -> tuple[ad.Var, ad.Var]:
    """Loss of every anchor in both directions (view1 -> view2, view2 -> view1)."""
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        raise ValueError("empty anchor set")
    a1 = ad.take_rows(h1, anchors)
    a2 = ad.take_rows(h2, anchors)
    return (_directional_losses(a1, a2, cfg.temperature),
            _directional_losses(a2, a1, cfg.temperature))


def node_loss(v: int, h1, h2, anchors, cfg: SimilarityConfig) -> float:
    """Loss of anchor ``v`` with view 1 as query, on plain arrays."""
    if not cfg.temperature > 0:
        raise ValueError("temperature must be positive")
    anchors = [int(a) for a in anchors]
    if v not in anchors:
        raise ValueError("v must be an anchor")
    tape = ad.Tape()
    fwd, _ = node_losses(tape.constant(h1), tape.constant(h2), anchors, cfg)
    return float(fwd.value[anchors.index(v)])


def objective(anchors, h1: ad.Var, h2: ad.Var, cfg: SimilarityConfig) -> ad.Var:
    """``(1 / 2k) * sum over anchors of [l(v, 1, 2) + l(v, 2, 1)]`` on the tape."""
    fwd, bwd = node_losses(h1, h2, anchors, cfg)
    k = fwd.value.shape[0]
    return ad.scale(ad.sum(ad.add(fwd, bwd)), 1.0 / (2 * k))
