"""Reverse-mode differentiation on a tape, with edge weights as gradient slots.

A :class:`Tape` records primitive applications in execution order. Leaves are
either named parameters (whose gradients :meth:`Tape.backward` reports) or
anonymous constants. The GCN propagation operator keeps its edge weights as
leaves too, so the same backward pass that trains the encoder also yields the
per-edge gradient used to rank edges for removal and insertion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Non-finite value where a finite one is required (divergence)."""


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)
    saved: object = None


class Var:
    """Handle to one value slot on a tape."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "Tape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.slot]

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[Record] = []
        self.leaf_names: dict[str, int] = {}
        self._leaf_slots: set[int] = set()
        self.diagnostics: dict[str, int] = {"zero_norm_rows": 0}

    def _push(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def leaf(self, value, name: str | None = None) -> Var:
        """Register an input. Named leaves get gradients reported by ``backward``."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite leaf {name!r}")
        slot = self._push(arr)
        self._leaf_slots.add(slot)
        if name is not None:
            if name in self.leaf_names:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaf_names[name] = slot
        return Var(self, slot)

    def constant(self, value) -> Var:
        return self.leaf(value)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        for x in inputs:
            if x.tape is not self:
                raise ValueError("operands live on a different tape")
        prim = PRIMITIVES[op]
        vals = [self.values[x.slot] for x in inputs]
        out, saved = prim.forward(vals, attrs, self)
        slot = self._push(out)
        self.records.append(Record(op, tuple(x.slot for x in inputs), slot, attrs, saved))
        return Var(self, slot)

    def replay(self, leaves: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every record from the leaf values; returns all slot values.

        ``leaves`` optionally overrides named leaves. The tape itself is not
        modified, so recorded values stay available for ``backward``.
        """
        vals = list(self.values)
        for name, v in (leaves or {}).items():
            vals[self.leaf_names[name]] = np.array(v, dtype=np.float64)
        scratch = Tape()
        for rec in self.records:
            out, _ = PRIMITIVES[rec.op].forward([vals[i] for i in rec.inputs], rec.attrs, scratch)
            vals[rec.output] = out
        return vals

    def backward(self, loss: Var) -> "Gradients":
        if loss.tape is not self or loss.slot >= len(self.values):
            raise ValueError("loss is not on this tape")
        if self.values[loss.slot].size != 1:
            raise ShapeError("loss must be a scalar")
        grads: dict[int, np.ndarray] = {loss.slot: np.ones_like(self.values[loss.slot])}
        for rec in reversed(self.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            vals = [self.values[i] for i in rec.inputs]
            parts = PRIMITIVES[rec.op].vjp(g, vals, self.values[rec.output], rec.attrs, rec.saved)
            for slot, part in zip(rec.inputs, parts):
                if part is None:
                    continue
                if slot in grads:
                    grads[slot] = grads[slot] + part
                else:
                    grads[slot] = part
        out = {}
        for name, slot in self.leaf_names.items():
            gv = grads.get(slot)
            gv = np.zeros_like(self.values[slot]) if gv is None else gv.reshape(self.values[slot].shape)
            if not np.all(np.isfinite(gv)):
                raise NumericalError(f"non-finite gradient at {name!r}")
            out[name] = gv
        return Gradients(out)


class Gradients(dict):
    """Mapping leaf name -> gradient array."""

    def of(self, var_name: str) -> np.ndarray:
        return self[var_name]


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _prim(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.vjp)
        return cls

    return register


def _check2d(*arrs):
    for a in arrs:
        if a.ndim != 2:
            raise ShapeError(f"expected a matrix, got shape {a.shape}")


@_prim("matmul")
class _MatMul:
    @staticmethod
    def forward(v, attrs, tape):
        a, b = v
        _check2d(a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        a, b = v
        return g @ b.T, a.T @ g


@_prim("add")
class _Add:
    @staticmethod
    def forward(v, attrs, tape):
        a, b = v
        if a.shape != b.shape:
            raise ShapeError(f"add {a.shape} + {b.shape}")
        return a + b, None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return g, g


@_prim("sub")
class _Sub:
    @staticmethod
    def forward(v, attrs, tape):
        a, b = v
        if a.shape != b.shape:
            raise ShapeError(f"sub {a.shape} - {b.shape}")
        return a - b, None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return g, -g


@_prim("add_bias")
class _AddBias:
    @staticmethod
    def forward(v, attrs, tape):
        a, b = v
        _check2d(a)
        if b.shape != (a.shape[1],):
            raise ShapeError(f"bias {b.shape} for matrix {a.shape}")
        return a + b[None, :], None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return g, g.sum(axis=0)


@_prim("relu")
class _Relu:
    @staticmethod
    def forward(v, attrs, tape):
        return np.maximum(v[0], 0.0), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g * (v[0] > 0),)


@_prim("prelu")
class _PRelu:
    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        return np.where(x > 0, x, attrs["slope"] * x), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g * np.where(v[0] > 0, 1.0, attrs["slope"]),)


@_prim("elu")
class _Elu:
    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        x = v[0]
        return (g * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))),)


@_prim("exp")
class _Exp:
    @staticmethod
    def forward(v, attrs, tape):
        return np.exp(v[0]), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g * out,)


@_prim("log")
class _Log:
    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        if np.any(x <= 0):
            raise NumericalError("log of non-positive value")
        return np.log(x), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g / v[0],)


@_prim("sum")
class _Sum:
    @staticmethod
    def forward(v, attrs, tape):
        axis = attrs.get("axis")
        return np.asarray(v[0].sum(axis=axis), dtype=np.float64), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        x = v[0]
        axis = attrs.get("axis")
        if axis is None:
            return (np.full_like(x, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


@_prim("scale")
class _Scale:
    @staticmethod
    def forward(v, attrs, tape):
        return v[0] * attrs["c"], None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g * attrs["c"],)


@_prim("mul")
class _Mul:
    @staticmethod
    def forward(v, attrs, tape):
        a, b = v
        if a.shape != b.shape:
            raise ShapeError(f"mul {a.shape} * {b.shape}")
        return a * b, None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        a, b = v
        return g * b, g * a


@_prim("transpose")
class _Transpose:
    @staticmethod
    def forward(v, attrs, tape):
        _check2d(v[0])
        return v[0].T.copy(), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g.T,)


@_prim("take_rows")
class _TakeRows:
    @staticmethod
    def forward(v, attrs, tape):
        return v[0][attrs["index"]], None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        full = np.zeros_like(v[0])
        np.add.at(full, attrs["index"], g)
        return (full,)


@_prim("pick")
class _Pick:
    """``out[i] = x[i, index[i]]``."""

    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        idx = attrs["index"]
        return x[np.arange(len(idx)), idx], None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        full = np.zeros_like(v[0])
        idx = attrs["index"]
        full[np.arange(len(idx)), idx] = g
        return (full,)


@_prim("diag")
class _Diag:
    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        if x.ndim != 2 or x.shape[0] != x.shape[1]:
            raise ShapeError("diag needs a square matrix")
        return np.diag(x).copy(), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (np.diag(g),)


@_prim("row_normalize")
class _RowNormalize:
    """Scale rows to unit norm; all-zero rows stay zero with zero gradient."""

    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        _check2d(x)
        norm = np.sqrt((x * x).sum(axis=1))
        zero = norm == 0
        tape.diagnostics["zero_norm_rows"] = tape.diagnostics.get("zero_norm_rows", 0) + int(zero.sum())
        safe = np.where(zero, 1.0, norm)
        y = x / safe[:, None]
        y[zero] = 0.0
        return y, (safe, zero)

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        safe, zero = saved
        dot = (g * out).sum(axis=1, keepdims=True)
        dx = (g - out * dot) / safe[:, None]
        dx[zero] = 0.0
        return (dx,)


@_prim("concat_cols")
class _ConcatCols:
    @staticmethod
    def forward(v, attrs, tape):
        _check2d(*v)
        if len({a.shape[0] for a in v}) != 1:
            raise ShapeError("concat_cols needs equal row counts")
        return np.concatenate(v, axis=1), None

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        edges = np.cumsum([a.shape[1] for a in v])[:-1]
        return tuple(np.split(g, edges, axis=1))


@_prim("logsumexp_rows")
class _LogSumExpRows:
    """Row-wise log-sum-exp over the entries where ``mask`` is true."""

    @staticmethod
    def forward(v, attrs, tape):
        x = v[0]
        _check2d(x)
        mask = attrs.get("mask")
        xm = x if mask is None else np.where(mask, x, -np.inf)
        top = xm.max(axis=1, keepdims=True)
        e = np.exp(xm - top)
        s = e.sum(axis=1, keepdims=True)
        return (np.log(s) + top)[:, 0], e / s

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        return (g[:, None] * saved,)


def _wrap(tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def matmul(a: Var, b: Var) -> Var:
    b = _wrap(a.tape, b)
    return a.tape.apply("matmul", a, b)


def add(a: Var, b: Var) -> Var:
    return a.tape.apply("add", a, _wrap(a.tape, b))


def sub(a: Var, b: Var) -> Var:
    return a.tape.apply("sub", a, _wrap(a.tape, b))


def mul(a: Var, b: Var) -> Var:
    return a.tape.apply("mul", a, _wrap(a.tape, b))


def add_bias(a: Var, b: Var) -> Var:
    return a.tape.apply("add_bias", a, _wrap(a.tape, b))


def relu(x: Var) -> Var:
    return x.tape.apply("relu", x)


def prelu(x: Var, slope: float = 0.25) -> Var:
    return x.tape.apply("prelu", x, slope=float(slope))


def elu(x: Var) -> Var:
    return x.tape.apply("elu", x)


def exp(x: Var) -> Var:
    return x.tape.apply("exp", x)


def log(x: Var) -> Var:
    return x.tape.apply("log", x)


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001
    return x.tape.apply("sum", x, axis=axis)


def mean(x: Var) -> Var:
    return scale(sum(x), 1.0 / x.value.size)


def scale(x: Var, c: float) -> Var:
    return x.tape.apply("scale", x, c=float(c))


def transpose(x: Var) -> Var:
    return x.tape.apply("transpose", x)


def take_rows(x: Var, index) -> Var:
    return x.tape.apply("take_rows", x, index=np.asarray(index, dtype=np.int64))


def pick(x: Var, index) -> Var:
    return x.tape.apply("pick", x, index=np.asarray(index, dtype=np.int64))


def diag(x: Var) -> Var:
    return x.tape.apply("diag", x)


def row_normalize(x: Var) -> Var:
    return x.tape.apply("row_normalize", x)


def concat_cols(*xs: Var) -> Var:
    return xs[0].tape.apply("concat_cols", *xs)


def logsumexp_rows(x: Var, mask=None) -> Var:
    return x.tape.apply("logsumexp_rows", x, mask=None if mask is None else np.asarray(mask, bool))


# ---------------------------------------------------------------------------
# normalized adjacency


def _normalize(n, pairs, w):
    """Return (sparse A_hat, deg, dinv) for ``D^-1/2 (A + I) D^-1/2``."""
    u, v = pairs[:, 0], pairs[:, 1]
    deg = 1.0 + np.bincount(u, weights=w, minlength=n) + np.bincount(v, weights=w, minlength=n)
    dinv = 1.0 / np.sqrt(deg)
    off = w * dinv[u] * dinv[v]
    diag_idx = np.arange(n)
    rows = np.concatenate([u, v, diag_idx])
    cols = np.concatenate([v, u, diag_idx])
    data = np.concatenate([off, off, 1.0 / deg])
    a_hat = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return a_hat, deg, dinv


class AdjacencyOperator:
    """``D^-1/2 (A + I) D^-1/2`` over base plus temporarily inserted edges.

    Both edge groups keep their weights as tape leaves named
    ``"{name}.base"`` and ``"{name}.extra"``; gradients with respect to them
    include the dependence of the degrees on the weights unless
    ``detach_normalization`` is set.
    """

    def __init__(self, tape: Tape, num_nodes: int, base_edges, base_weights,
                 extra_edges=None, extra_weights=None, name: str = "adj",
                 detach_normalization: bool = False):
        self.tape = tape
        self.num_nodes = int(num_nodes)
        self.name = name
        self.base_edges = np.asarray(base_edges, dtype=np.int64).reshape(-1, 2)
        self.extra_edges = np.asarray(
            np.empty((0, 2)) if extra_edges is None else extra_edges, dtype=np.int64
        ).reshape(-1, 2)
        if extra_weights is None:
            extra_weights = np.empty(0)
        # weights may be passed as existing leaves (used by gradient checks)
        self.base_weights = base_weights if isinstance(base_weights, Var) else tape.leaf(base_weights, f"{name}.base")
        self.extra_weights = extra_weights if isinstance(extra_weights, Var) else tape.leaf(extra_weights, f"{name}.extra")
        bw, ew = self.base_weights.value, self.extra_weights.value
        if bw.shape != (len(self.base_edges),) or ew.shape != (len(self.extra_edges),):
            raise ShapeError("one weight per edge required")
        self.detach_normalization = detach_normalization
        self.degrees = _normalize(self.num_nodes, self.pairs, np.concatenate([bw, ew]))[1]

    @property
    def pairs(self) -> np.ndarray:
        return np.concatenate([self.base_edges, self.extra_edges])

    def dense(self) -> np.ndarray:
        w = np.concatenate([self.base_weights.value, self.extra_weights.value])
        return _normalize(self.num_nodes, self.pairs, w)[0].toarray()

    def __matmul__(self, m: Var) -> Var:
        return spmm(self, m)


def normalized_adjacency(g, extra=None, tape: Tape | None = None, name: str = "adj",
                         detach_normalization: bool = False) -> AdjacencyOperator:
    """Build the propagation operator of ``g`` plus optional weighted extra edges.

    ``extra`` is ``(pairs, weights)``; pairs must not duplicate edges of ``g``.
    """
    tape = Tape() if tape is None else tape
    ep, ew = (None, None) if extra is None else extra
    if ep is not None:
        ep = np.asarray(ep, dtype=np.int64).reshape(-1, 2)
        ew = np.asarray(ew, dtype=np.float64)
        if np.any(ew <= 0) or np.any(ew > 1):
            raise ValueError("extra edge weights must lie in (0, 1]")
        if np.any(ep[:, 0] == ep[:, 1]):
            raise ValueError("extra edges may not be self-loops")
        lo, hi = np.minimum(ep[:, 0], ep[:, 1]), np.maximum(ep[:, 0], ep[:, 1])
        keys = lo * g.num_nodes + hi
        base = g.edges[:, 0] * g.num_nodes + g.edges[:, 1]
        if np.intersect1d(keys, base).size or len(np.unique(keys)) != len(keys):
            raise ValueError("extra edge duplicates an existing edge")
        ep = np.column_stack([lo, hi])
    return AdjacencyOperator(tape, g.num_nodes, g.edges, g.weights, ep, ew, name=name,
                             detach_normalization=detach_normalization)


@_prim("spmm")
class _SpMM:
    @staticmethod
    def forward(v, attrs, tape):
        wb, we, m = v
        _check2d(m)
        n = attrs["n"]
        if m.shape[0] != n:
            raise ShapeError(f"operator is {n}x{n}, matrix has {m.shape[0]} rows")
        a_hat, deg, dinv = _normalize(n, attrs["pairs"], np.concatenate([wb, we]))
        out = a_hat @ m
        return out, (a_hat, deg, dinv)

    @staticmethod
    def vjp(g, v, out, attrs, saved):
        wb, we, m = v
        a_hat, deg, dinv = saved
        pairs = attrs["pairs"]
        u, w_ = pairs[:, 0], pairs[:, 1]
        gm = a_hat.T @ g
        # direct term: A_hat[u,v] = w * dinv_u * dinv_v in both orientations
        gw = ((g[u] * m[w_]).sum(axis=1) + (g[w_] * m[u]).sum(axis=1)) * dinv[u] * dinv[w_]
        if not attrs["detach"]:
            # d loss / d deg_i = -(g_i . out_i + m_i . gm_i) / (2 deg_i)
            gdeg = -((g * out).sum(axis=1) + (m * gm).sum(axis=1)) / (2.0 * deg)
            gw = gw + gdeg[u] + gdeg[w_]
        nb = len(wb)
        return gw[:nb], gw[nb:], gm


def spmm(op: AdjacencyOperator, m: Var) -> Var:
    """``A_hat @ m``; backward reaches ``m`` and every edge-weight slot."""
    return op.tape.apply("spmm", op.base_weights, op.extra_weights, m,
                         n=op.num_nodes, pairs=op.pairs, detach=op.detach_normalization)


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_check(program: Callable[[Tape, dict[str, Var]], Var], inputs: dict[str, np.ndarray],
             eps: float = 1e-5, abs_floor: float = 1e-8, slots: dict[str, np.ndarray] | None = None,
             report: list | None = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``program(tape, leaves)`` must build a scalar from the given named leaves.
    Entries whose absolute disagreement is at most ``abs_floor`` count as
    exact. ``slots`` optionally restricts the check to some flat indices per
    input. ``report`` collects ``(name, index, analytic, numeric)`` rows.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def run(vals):
        tape = Tape()
        leaves = {k: tape.leaf(v, k) for k, v in vals.items()}
        return tape, program(tape, leaves)

    tape, loss = run(inputs)
    grads = tape.backward(loss)
    worst = 0.0
    for name, base in inputs.items():
        base = np.asarray(base, dtype=np.float64)
        idx = range(base.size) if slots is None or name not in slots else slots[name]
        for i in idx:
            vals = dict(inputs)
            hi = base.copy().ravel()
            lo = base.copy().ravel()
            hi[i] += eps
            lo[i] -= eps
            vals[name] = hi.reshape(base.shape)
            f_hi = float(run(vals)[1].value)
            vals[name] = lo.reshape(base.shape)
            f_lo = float(run(vals)[1].value)
            numeric = (f_hi - f_lo) / (2 * eps)
            analytic = float(grads[name].ravel()[i])
            diff = abs(analytic - numeric)
            if report is not None:
                report.append((name, i, analytic, numeric))
            if diff <= abs_floor:
                continue
            worst = max(worst, diff / max(abs(analytic), abs(numeric)))
    return worst
