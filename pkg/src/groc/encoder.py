"""Two-layer GCN encoder and the MLP projection head used inside the similarity."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

ENCODER_KEYS = ("W1", "W2")
HEAD_KEYS = ("Wp1", "bp1", "Wp2", "bp2")


@dataclass(frozen=True)
class EncoderParams:
    W1: np.ndarray
    W2: np.ndarray
    act: str = "relu"
    prelu_slope: float = 0.25

    def __post_init__(self):
        if self.act not in ("relu", "prelu"):
            raise ValueError(f"unknown activation {self.act!r}")
        if self.W1.shape[1] != self.W2.shape[0]:
            raise ValueError("W1 and W2 shapes are inconsistent")
        if not (np.all(np.isfinite(self.W1)) and np.all(np.isfinite(self.W2))):
            raise ad.NumericalError("non-finite encoder weights")

    @property
    def n_hidden(self) -> int:
        return self.W2.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "W2": self.W2}


@dataclass(frozen=True)
class ProjectionParams:
    Wp1: np.ndarray
    bp1: np.ndarray
    Wp2: np.ndarray
    bp2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"Wp1": self.Wp1, "bp1": self.bp1, "Wp2": self.Wp2, "bp2": self.bp2}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(seed: int, d: int, n_h: int, act: str = "relu",
                prelu_slope: float = 0.25) -> tuple[EncoderParams, ProjectionParams]:
    """Glorot-uniform weights, zero biases. Layer widths are ``2*n_h`` then ``n_h``."""
    if d < 1 or n_h < 1:
        raise ValueError("d and n_h must be positive")
    rng = np.random.default_rng(seed)
    enc = EncoderParams(glorot(rng, d, 2 * n_h), glorot(rng, 2 * n_h, n_h), act, prelu_slope)
    head = ProjectionParams(glorot(rng, n_h, n_h), np.zeros(n_h), glorot(rng, n_h, n_h), np.zeros(n_h))
    return enc, head


def param_leaves(tape: ad.Tape, enc: EncoderParams, head: ProjectionParams | None = None):
    leaves = {k: tape.leaf(v, k) for k, v in enc.arrays().items()}
    if head is not None:
        leaves.update({k: tape.leaf(v, k) for k, v in head.arrays().items()})
    return leaves


def encode(x: ad.Var, adj: ad.AdjacencyOperator, leaves: dict[str, ad.Var], act: str = "relu",
           prelu_slope: float = 0.25) -> ad.Var:
    """``Z = A_hat @ act(A_hat @ X @ W1) @ W2`` (no biases, no output activation)."""
    h = ad.spmm(adj, ad.matmul(x, leaves["W1"]))
    h = ad.relu(h) if act == "relu" else ad.prelu(h, prelu_slope)
    return ad.spmm(adj, ad.matmul(h, leaves["W2"]))


def project(z: ad.Var, leaves: dict[str, ad.Var]) -> ad.Var:
    """Row-wise ``Wp2 . elu(Wp1 . z + bp1) + bp2`` (weights stored as right factors)."""
    h = ad.elu(ad.add_bias(ad.matmul(z, leaves["Wp1"]), leaves["bp1"]))
    return ad.add_bias(ad.matmul(h, leaves["Wp2"]), leaves["bp2"])


def embed(g, enc: EncoderParams) -> np.ndarray:
    """Frozen forward pass of the encoder on graph ``g``; returns ``Z``."""
    tape = ad.Tape()
    leaves = param_leaves(tape, enc)
    adj = ad.normalized_adjacency(g, tape=tape)
    return encode(tape.constant(g.features), adj, leaves, enc.act, enc.prelu_slope).value


# ---------------------------------------------------------------------------
# checkpoints: one .npz of named matrices plus a JSON manifest


def save_checkpoint(path: str | Path, enc: EncoderParams, head: ProjectionParams,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {**enc.arrays(), **head.arrays()}
    np.savez(path / "params.npz", **arrays)
    manifest = {
        "act": enc.act,
        "prelu_slope": enc.prelu_slope,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, ProjectionParams, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    with np.load(path / "params.npz") as data:
        arrays = {k: data[k] for k in data.files}
    for k, shape in manifest["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"checkpoint array {k} has shape {arrays[k].shape}, manifest says {shape}")
    enc = EncoderParams(arrays["W1"], arrays["W2"], manifest["act"], manifest["prelu_slope"])
    head = ProjectionParams(*(arrays[k] for k in HEAD_KEYS))
    return enc, head, manifest
