"""Training loop for GROC and the GRACE / GCA-DE / GRACE-ADV baselines.

All four methods share one loop; they differ in which transformations run:

============  ==================  ===================  ==========  =========
method        random edge drop    gradient edge drop   insertion   anchors
============  ==================  ===================  ==========  =========
grace         uniform             no                   no          all nodes
gca-de        degree-weighted     no                   no          all nodes
grace-adv     no                  yes                  no          all nodes
groc          no                  yes                  yes         batches
============  ==================  ===================  ==========  =========
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .contrastive import SimilarityConfig, objective
from .encoder import EncoderParams, ProjectionParams, encode, init_params, project
from .graph import Graph, receptive_fields
from .transforms import (
    AdversarialConfig,
    StochasticConfig,
    apply_adversarial,
    build_candidate_sets,
    drop_edges_stochastic,
    mask_features,
)

log = logging.getLogger(__name__)

METHODS = ("grace", "gca-de", "grace-adv", "groc")
ENCODER_DEPTH = 2


@dataclass(frozen=True)
class TrainConfig:
    method: str = "grace"
    lr: float = 5e-4
    weight_decay: float = 1e-5
    n_epochs: int = 200
    seed: int = 0
    n_hidden: int = 128
    act: str = "relu"
    prelu_slope: float = 0.25
    temperature: float = 0.4
    p1: float = 0.3
    p2: float = 0.4
    q_minus1: float = 0.2
    q_minus2: float = 0.4
    removal_scheme: str = "uniform"
    mask_axis: str = "column"
    q_plus1: float = 0.0
    q_plus2: float = 0.0
    batch_size: int | None = None
    detach_normalization: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")
        # delegate range checks
        self.stochastic, self.adversarial, self.similarity

    @property
    def stochastic(self) -> StochasticConfig:
        return StochasticConfig(self.p1, self.p2, self.q_minus1, self.q_minus2,
                                self.removal_scheme, self.mask_axis)

    @property
    def adversarial(self) -> AdversarialConfig:
        return AdversarialConfig(self.q_plus1, self.q_plus2, self.batch_size or 1)

    @property
    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(self.temperature)

    @property
    def scheme(self) -> str:
        return "degree" if self.method == "gca-de" else self.removal_scheme

    @property
    def drops_randomly(self) -> bool:
        return self.method in ("grace", "gca-de")

    @property
    def uses_gradients(self) -> bool:
        return self.method in ("grace-adv", "groc")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update with L2 added to the gradient (``g + wd * p``)."""
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise ad.NumericalError(f"non-finite gradient for {k}")
        g = g + weight_decay * p
        m = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    batches: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,loss,removed,inserted,seconds"]
        for e in self.epochs:
            lines.append(f"{e['epoch']},{e['loss']!r},{e['removed']},{e['inserted']},{e['seconds']:.4f}")
        return "\n".join(lines) + "\n"


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Random partition of ``range(n)`` into ``ceil(n / b)`` batches, each sorted."""
    perm = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def _stream(cfg: TrainConfig, epoch: int, batch: int, view: int, purpose: int):
    return np.random.default_rng([cfg.seed, epoch, batch, view, purpose])


class _Params:
    """Flat name -> array view over encoder and head parameters."""

    def __init__(self, enc: EncoderParams, head: ProjectionParams):
        self.act, self.slope = enc.act, enc.prelu_slope
        self.arrays = {**enc.arrays(), **head.arrays()}

    def split(self) -> tuple[EncoderParams, ProjectionParams]:
        a = self.arrays
        return (EncoderParams(a["W1"], a["W2"], self.act, self.slope),
                ProjectionParams(a["Wp1"], a["bp1"], a["Wp2"], a["bp2"]))


def contrastive_pass(params: dict[str, np.ndarray], views: list[Graph], anchors, cfg: TrainConfig,
                     extra=None):
    """Forward both views, compute the anchor-restricted objective and backpropagate.

    ``extra`` is ``(pairs, weight)`` temporarily added to both views. Returns
    ``(loss, grads)`` where ``grads`` holds parameter gradients and the edge
    gradients ``view{i}.base`` / ``view{i}.extra``.
    """
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.items()}
    heads = []
    for i, view in enumerate(views):
        ext = None
        if extra is not None and len(extra[0]):
            ext = (extra[0], np.full(len(extra[0]), extra[1]))
        adj = ad.normalized_adjacency(view, ext, tape=tape, name=f"view{i}",
                                      detach_normalization=cfg.detach_normalization)
        z = encode(tape.constant(view.features), adj, leaves, cfg.act, cfg.prelu_slope)
        heads.append(project(z, leaves))
    loss = objective(anchors, heads[0], heads[1], cfg.similarity)
    return float(loss.value), tape.backward(loss)


def train(g: Graph, cfg: TrainConfig, callback=None):
    """Run ``cfg.method`` on ``g``; returns ``(EncoderParams, ProjectionParams, TrainReport)``.

    ``callback(epoch, params)`` is invoked after each epoch if given.
    """
    n = g.num_nodes
    enc, head = init_params(cfg.seed, g.num_features, cfg.n_hidden, cfg.act, cfg.prelu_slope)
    params = _Params(enc, head)
    state = AdamState()
    report = TrainReport()
    batch_size = n if cfg.method != "groc" or cfg.batch_size is None else min(cfg.batch_size, n)
    fields = receptive_fields(g, ENCODER_DEPTH) if cfg.uses_gradients else None
    rates_plus = (cfg.q_plus1, cfg.q_plus2) if cfg.method == "groc" else (0.0, 0.0)
    rates_minus = (cfg.q_minus1, cfg.q_minus2)
    masks = (cfg.p1, cfg.p2)

    for epoch in range(cfg.n_epochs):
        t0 = time.perf_counter()
        if batch_size == n:
            batches = [np.arange(n)]
        else:
            batches = epoch_batches(n, batch_size, cfg.seed, epoch)
        losses, removed_total, inserted_total = [], 0, 0
        for b, anchors in enumerate(batches):
            views = []
            for i in range(2):
                x, _ = mask_features(g.features, masks[i], _stream(cfg, epoch, b, i, 0), cfg.mask_axis)
                view = g.replace(features=x)
                if cfg.drops_randomly:
                    view, delta = drop_edges_stochastic(view, rates_minus[i], cfg.scheme,
                                                        _stream(cfg, epoch, b, i, 1))
                    removed_total += len(delta.removed)
                views.append(view)
            stats = {"epoch": epoch, "batch": b}
            if cfg.uses_gradients:
                s_minus, s_plus = build_candidate_sets(anchors, fields, g)
                if not any(rates_plus) or len(s_plus) == 0:
                    s_plus = np.empty((0, 2), np.int64)
                extra = (s_plus, 1.0 / len(s_plus)) if len(s_plus) else None
                _, pre = contrastive_pass(params.arrays, views, anchors, cfg, extra)
                for i in range(2):
                    views[i], delta = apply_adversarial(
                        views[i], pre[f"view{i}.base"], pre[f"view{i}.extra"], s_minus, s_plus,
                        rates_minus[i], rates_plus[i])
                    removed_total += len(delta.removed)
                    inserted_total += len(delta.inserted)
                    stats[f"removed{i + 1}"] = len(delta.removed)
                    stats[f"inserted{i + 1}"] = len(delta.inserted)
                stats["s_minus"], stats["s_plus"] = len(s_minus), len(s_plus)
            loss, grads = contrastive_pass(params.arrays, views, anchors, cfg)
            if not math.isfinite(loss):
                raise ad.NumericalError(f"non-finite loss at epoch {epoch}")
            params.arrays = adam_step(params.arrays, grads, state, cfg.lr, cfg.weight_decay)
            losses.append(loss)
            stats["loss"] = loss
            report.batches.append(stats)
        epoch_loss = float(np.mean(losses))
        report.epochs.append({
            "epoch": epoch,
            "loss": epoch_loss,
            "removed": removed_total,
            "inserted": inserted_total,
            "seconds": time.perf_counter() - t0,
        })
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
        if callback is not None:
            callback(epoch, params)
    enc, head = params.split()
    return enc, head, report


def train_groc(g: Graph, cfg: TrainConfig):
    if cfg.method != "groc":
        raise ValueError("train_groc needs method='groc'")
    return train(g, cfg)


def train_baseline(g: Graph, cfg: TrainConfig):
    if cfg.method == "groc":
        raise ValueError("use train_groc for method='groc'")
    return train(g, cfg)
