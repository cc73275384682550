"""Linear evaluation, GCN surrogate, greedy structure attack and robust accuracy.

The attack is a direct, structure-only evasion attack in the spirit of
Nettack: it flips edges incident to the target, scoring every flip by the
exact change of the target's margin under the linearized surrogate
``A_hat^2 X W1 W2``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, glorot
from .graph import Graph
from .trainer import AdamState, adam_step

log = logging.getLogger(__name__)

N_EASY, N_HARD, N_RANDOM = 10, 10, 20


def _cross_entropy(logits: ad.Var, labels) -> ad.Var:
    return ad.mean(ad.sub(ad.logsumexp_rows(logits), ad.pick(logits, labels)))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    W: np.ndarray
    b: np.ndarray
    trace: list[float] = field(default_factory=list)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.W + self.b

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(z), axis=1)

    def accuracy(self, z: np.ndarray, labels: np.ndarray, idx=None) -> float:
        idx = np.arange(len(labels)) if idx is None else np.asarray(idx)
        return float(np.mean(self.predict(z[idx]) == labels[idx]))


def linear_probe_train(z: np.ndarray, labels: np.ndarray, train_idx, seed: int = 0,
                       lr: float = 0.01, steps: int = 1000, weight_decay: float = 1e-5,
                       num_classes: int | None = None) -> LinearProbe:
    """Multinomial logistic regression on frozen embeddings, full-batch Adam."""
    z = np.asarray(z, dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    y = np.asarray(labels)[train_idx]
    if len(np.unique(y)) < 2:
        raise ValueError("training split contains a single class")
    c = int(num_classes or int(np.max(labels)) + 1)
    rng = np.random.default_rng(seed)
    params = {"W": glorot(rng, z.shape[1], c), "b": np.zeros(c)}
    state = AdamState()
    zt = z[train_idx]
    trace = []
    for _ in range(steps):
        tape = ad.Tape()
        w, b = tape.leaf(params["W"], "W"), tape.leaf(params["b"], "b")
        loss = _cross_entropy(ad.add_bias(ad.matmul(tape.constant(zt), w), b), y)
        grads = tape.backward(loss)
        trace.append(float(loss.value))
        params = adam_step(params, grads, state, lr, weight_decay)
    return LinearProbe(params["W"], params["b"], trace)


# ---------------------------------------------------------------------------
# surrogate


@dataclass
class SurrogateModel:
    W1: np.ndarray
    W2: np.ndarray
    trace: list[float] = field(default_factory=list)

    @property
    def weight(self) -> np.ndarray:
        """Linearized weight ``W1 @ W2``."""
        return self.W1 @ self.W2

    def logits(self, g: Graph) -> np.ndarray:
        """Linearized logits ``A_hat^2 X W1 W2``."""
        a = normalized_dense(g)
        return a @ (a @ (g.features @ self.weight))

    def nonlinear_logits(self, g: Graph) -> np.ndarray:
        a = normalized_dense(g)
        return a @ (np.maximum(a @ g.features @ self.W1, 0) @ self.W2)


def normalized_dense(g: Graph) -> np.ndarray:
    tape = ad.Tape()
    return ad.normalized_adjacency(g, tape=tape).dense()


def surrogate_fit(g: Graph, labels=None, splits=None, seed: int = 0, hidden: int = 16,
                  lr: float = 0.01, epochs: int = 200, weight_decay: float = 5e-4) -> SurrogateModel:
    """Supervised bias-free 2-layer GCN trained with cross-entropy on the train split."""
    labels = g.labels if labels is None else np.asarray(labels)
    splits = g.splits if splits is None else splits
    if labels is None or splits is None:
        raise ValueError("surrogate needs labels and splits")
    train_idx = np.asarray(splits[0], dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    c = int(np.max(labels)) + 1
    rng = np.random.default_rng(seed)
    params = {"W1": glorot(rng, g.num_features, hidden), "W2": glorot(rng, hidden, c)}
    state = AdamState()
    trace = []
    for _ in range(epochs):
        tape = ad.Tape()
        w1, w2 = tape.leaf(params["W1"], "W1"), tape.leaf(params["W2"], "W2")
        adj = ad.normalized_adjacency(g, tape=tape)
        h = ad.relu(ad.spmm(adj, ad.matmul(tape.constant(g.features), w1)))
        out = ad.spmm(adj, ad.matmul(h, w2))
        loss = _cross_entropy(ad.take_rows(out, train_idx), labels[train_idx])
        if not np.isfinite(loss.value):
            raise ad.NumericalError("surrogate training diverged")
        trace.append(float(loss.value))
        grads = {k: v for k, v in tape.backward(loss).items() if k in params}
        params = adam_step(params, grads, state, lr, weight_decay)
    return SurrogateModel(params["W1"], params["W2"], trace)


def margins(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """True-class logit minus the best other logit, per row."""
    rows = np.arange(len(labels))
    true = logits[rows, labels]
    other = logits.copy()
    other[rows, labels] = -np.inf
    return true - other.max(axis=1)


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetSet:
    easiest: list[int]
    hardest: list[int]
    random: list[int]
    margins: dict[int, float]

    @property
    def all(self) -> list[int]:
        return self.easiest + self.hardest + self.random


def select_targets(surrogate: SurrogateModel, g: Graph, splits=None, seed: int = 0) -> TargetSet:
    """Lowest-margin 10, highest-margin 10 and 20 random remaining test nodes."""
    splits = g.splits if splits is None else splits
    test = np.asarray(splits[2], dtype=np.int64)
    need = N_EASY + N_HARD + N_RANDOM
    if len(test) < need:
        raise ValueError(f"test split has {len(test)} nodes, need at least {need}")
    m = margins(surrogate.logits(g), g.labels)[test]
    order = test[np.lexsort((test, m))]
    easiest = order[:N_EASY].tolist()
    hardest = order[::-1][:N_HARD].tolist()
    taken = set(easiest) | set(hardest)
    rest = np.array([v for v in test.tolist() if v not in taken], dtype=np.int64)
    rng = np.random.default_rng(seed)
    random = sorted(rng.choice(rest, size=N_RANDOM, replace=False).tolist())
    table = {int(v): float(x) for v, x in zip(test.tolist(), m.tolist())}
    return TargetSet(easiest, hardest, random, table)


# ---------------------------------------------------------------------------
# attack


@dataclass
class AttackResult:
    target: int
    budget: int
    flips: list[tuple[int, int, str]]
    margin_trace: list[float]
    prediction: int

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "budget": self.budget,
            "flips": [list(f) for f in self.flips],
            "margin_trace": self.margin_trace,
            "prediction": self.prediction,
        }


class _LinearizedState:
    """Incremental bookkeeping for exact target logits after one edge flip.

    With ``d`` the self-loop degrees and ``P = X W``, the target row of the
    linearized logits is ``d_t^-1/2 * sum_{k in N[t]} s_k / d_k`` where
    ``s_k = sum_{j in N[k]} P_j / sqrt(d_j)`` and ``N[k]`` is the closed
    neighbourhood. A flip of ``(t, u)`` only changes the degrees of ``t`` and
    ``u`` and the membership of ``t`` / ``u`` in each other's neighbourhood.
    """

    def __init__(self, adj: np.ndarray, proj: np.ndarray):
        self.adj = adj.copy()
        self.proj = proj
        self.deg = 1.0 + adj.sum(axis=1)
        scaled = proj / np.sqrt(self.deg)[:, None]
        self.s = scaled + adj.astype(np.float64) @ scaled

    def logits(self, t: int) -> np.ndarray:
        k = np.concatenate([[t], np.flatnonzero(self.adj[t])])
        return (self.s[k] / self.deg[k][:, None]).sum(axis=0) / np.sqrt(self.deg[t])

    def logits_after_flip(self, t: int, u: int) -> np.ndarray:
        adj, p, d = self.adj, self.proj, self.deg
        removing = bool(adj[t, u])
        delta = -1.0 if removing else 1.0
        dt, du = d[t] + delta, d[u] + delta
        ct = 1 / np.sqrt(dt) - 1 / np.sqrt(d[t])
        cu = 1 / np.sqrt(du) - 1 / np.sqrt(d[u])
        nbrs = np.flatnonzero(adj[t])
        others = nbrs[nbrs != u]
        # neighbours other than u keep t; they see u only if already adjacent to it
        s_o = self.s[others] + ct * p[t] + adj[others, u][:, None] * (cu * p[u])
        total = (s_o / d[others][:, None]).sum(axis=0)
        s_t = self.s[t] + ct * p[t]
        if removing:
            s_t = s_t - p[u] / np.sqrt(d[u])
        else:
            s_t = s_t + p[u] / np.sqrt(du)
            s_u = self.s[u] + cu * p[u] + p[t] / np.sqrt(dt)
            total = total + s_u / du
        total = total + s_t / dt
        return total / np.sqrt(dt)

    def flip(self, t: int, u: int) -> None:
        self.adj[t, u] = self.adj[u, t] = not self.adj[t, u]
        self.__init__(self.adj, self.proj)


def _margin(logit_row: np.ndarray, label: int) -> float:
    other = np.delete(logit_row, label)
    return float(logit_row[label] - other.max())


def attack_evasion(g: Graph, target: int, budget: int, surrogate: SurrogateModel,
                   label: int | None = None) -> AttackResult:
    """Greedy direct structure attack on ``target`` with at most ``budget`` flips.

    Each step evaluates every flip ``(target, u)`` and applies the one that
    lowers the surrogate margin the most (ties: smallest ``u``); it stops when
    no flip lowers the margin.
    """
    label = int(g.labels[target] if label is None else label)
    adj = np.zeros((g.num_nodes, g.num_nodes), dtype=bool)
    adj[g.edges[:, 0], g.edges[:, 1]] = True
    adj[g.edges[:, 1], g.edges[:, 0]] = True
    state = _LinearizedState(adj, g.features @ surrogate.weight)
    current = _margin(state.logits(target), label)
    trace = [current]
    flips = []
    candidates = [u for u in range(g.num_nodes) if u != target]
    for _ in range(budget):
        best_u, best = None, current
        for u in candidates:
            m = _margin(state.logits_after_flip(target, u), label)
            if m < best:
                best_u, best = u, m
        if best_u is None:
            break
        kind = "remove" if state.adj[target, best_u] else "insert"
        state.flip(target, best_u)
        a, b = sorted((target, best_u))
        flips.append((a, b, kind))
        current = _margin(state.logits(target), label)
        trace.append(current)
    prediction = int(np.argmax(state.logits(target)))
    return AttackResult(int(target), int(budget), flips, trace, prediction)


def perturb(g: Graph, flips) -> Graph:
    """Apply ``(u, v, insert|remove)`` flips to an unweighted graph."""
    n = g.num_nodes
    keys = set((g.edges[:, 0] * n + g.edges[:, 1]).tolist())
    for u, v, kind in flips:
        a, b = min(u, v), max(u, v)
        if a == b:
            raise ValueError("self-loop flip")
        key = a * n + b
        if kind == "insert":
            if key in keys:
                raise ValueError(f"edge ({a}, {b}) already present")
            keys.add(key)
        elif kind == "remove":
            if key not in keys:
                raise ValueError(f"edge ({a}, {b}) not present")
            keys.remove(key)
        else:
            raise ValueError(f"unknown flip kind {kind!r}")
    ordered = np.array(sorted(keys), dtype=np.int64)
    edges = np.column_stack([ordered // n, ordered % n]) if len(ordered) else np.empty((0, 2), np.int64)
    return g.replace(edges=edges, weights=np.ones(len(edges)))


# ---------------------------------------------------------------------------
# robust accuracy


def embed_target(g: Graph, enc: EncoderParams, xw1: np.ndarray | None = None) -> np.ndarray:
    """Frozen encoder forward pass reusing a precomputed ``X @ W1``."""
    tape = ad.Tape()
    adj = ad.normalized_adjacency(g, tape=tape)
    xw = tape.constant(g.features @ enc.W1 if xw1 is None else xw1)
    h = ad.spmm(adj, xw)
    h = ad.relu(h) if enc.act == "relu" else ad.prelu(h, enc.prelu_slope)
    return ad.spmm(adj, ad.matmul(h, tape.constant(enc.W2))).value


@dataclass
class RobustReport:
    accuracy: dict[int, float]
    accuracy_clean_correct: dict[int, float]
    correct: dict[int, dict[int, bool]]


def run_attacks(g: Graph, targets, budget: int, surrogate: SurrogateModel) -> dict[int, AttackResult]:
    return {int(t): attack_evasion(g, int(t), budget, surrogate) for t in sorted(targets)}


def robust_accuracy(enc: EncoderParams, probe: LinearProbe, g: Graph, targets, budgets,
                    surrogate: SurrogateModel | None = None,
                    attacks: dict[int, AttackResult] | None = None) -> RobustReport:
    """Fraction of targets still classified correctly for each budget.

    Budget ``k`` uses the first ``k`` flips of the greedy attack, so budgets
    are nested. Budget 0 is always included. The second table restricts to
    targets that were correct on the clean graph.
    """
    targets = [int(t) for t in targets]
    budgets = sorted(set(int(b) for b in budgets) | {0})
    if attacks is None:
        if surrogate is None:
            raise ValueError("need a surrogate or precomputed attacks")
        attacks = run_attacks(g, targets, max(budgets), surrogate)
    xw1 = g.features @ enc.W1
    clean_pred = probe.predict(embed_target(g, enc, xw1)[targets])
    correct: dict[int, dict[int, bool]] = {}
    for t, p0 in zip(targets, clean_pred):
        row = {}
        for b in budgets:
            flips = attacks[t].flips[:b]
            if b == 0 or not flips:
                pred = p0
            else:
                z = embed_target(perturb(g, flips), enc, xw1)
                pred = probe.predict(z[[t]])[0]
            row[b] = bool(pred == g.labels[t])
        correct[t] = row
    acc = {b: float(np.mean([correct[t][b] for t in targets])) for b in budgets}
    clean_ok = [t for t in targets if correct[t][0]]
    acc_cc = {b: float(np.mean([correct[t][b] for t in clean_ok])) if clean_ok else float("nan")
              for b in budgets}
    return RobustReport(acc, acc_cc, correct)


def attack_log(attacks: dict[int, AttackResult]) -> str:
    return json.dumps([attacks[t].to_dict() for t in sorted(attacks)], indent=1) + "\n"
