"""Bias-free MLP feature extractor (the meta-learner) and the linear task head.

Layer ``k`` computes ``r_k = phi_k(W_k r_{k-1})``. Hidden layers use ReLU, the
last layer uses the configured head activation. Inputs are handled row-wise:
a batch ``X`` of shape ``(N, d_in)`` maps to features of shape ``(N, d_L)``.

With ``input_bias`` the raw input is augmented to ``(x, 1)`` before the first
layer. The network stays a product of weight matrices and activations, but it
is no longer positively homogeneous in ``x``. A scalar-input ReLU network
without it collapses to ``h(x) = max(x,0) u + max(-x,0) u'``, rank two.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as ad

HEADS = ("relu", "tanh")


def _act(name: str):
    if name == "relu":
        return ad.relu
    if name == "tanh":
        return ad.tanh
    raise ValueError(f"unknown activation {name!r}; expected one of {HEADS}")


def _act_np(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.where(x > 0.0, x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}; expected one of {HEADS}")


@dataclass
class MetaLearner:
    """Weights ``W_1..W_L`` plus the snapshot taken at construction."""

    weights: list[np.ndarray]
    head: str = "relu"
    initial: list[np.ndarray] = field(default=None, repr=False)
    input_bias: bool = False

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head activation {self.head!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        for prev, w in zip(self.weights, self.weights[1:]):
            if w.shape[1] != prev.shape[0]:
                raise ad.ShapeError("MetaLearner layers", prev.shape, w.shape)
        if self.initial is None:
            self.initial = [w.copy() for w in self.weights]
        else:
            self.initial = [np.array(w, dtype=np.float64) for w in self.initial]
        for w in self.initial:
            w.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_dim(self) -> int:
        """Dimension of the raw input (before augmentation)."""
        return self.weights[0].shape[1] - int(self.input_bias)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def copy(self) -> MetaLearner:
        return MetaLearner([w.copy() for w in self.weights], self.head, self.initial,
                           self.input_bias)

    def features(self, x) -> np.ndarray:
        """Feature matrix for a batch of inputs, without building a graph."""
        r = as_inputs(x, self.input_dim, self.input_bias)
        last = len(self.weights) - 1
        for k, w in enumerate(self.weights):
            r = _act_np(self.head if k == last else "relu", r @ w.T)
        return r

    def frobenius_norms(self) -> list[float]:
        return [float(np.linalg.norm(w)) for w in self.weights]


def as_inputs(x, input_dim: int = 1, input_bias: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1:
        arr = arr.reshape(-1, input_dim)
    if arr.shape[1] != input_dim:
        raise ad.ShapeError("features", arr.shape, (arr.shape[0], input_dim))
    if input_bias:
        arr = np.hstack([arr, np.ones((arr.shape[0], 1))])
    return arr


def param_nodes(h: MetaLearner) -> list[ad.Node]:
    return [ad.param(w.copy()) for w in h.weights]


def features(weights: Sequence[ad.Node], x, head: str, input_bias: bool = False) -> ad.Node:
    """Graph-connected features ``h(x)`` for a batch of inputs (rows)."""
    r = ad.const(as_inputs(x, weights[0].shape[1] - int(input_bias), input_bias))
    last = len(weights) - 1
    for k, w in enumerate(weights):
        r = _act(head if k == last else "relu")(ad.matmul(r, ad.transpose(w)))
    return r


def predict(w: ad.Node, z: ad.Node) -> ad.Node:
    """``z @ w``: one prediction per feature row. ``w`` is a column vector."""
    if w.shape[1] != 1 or z.shape[1] != w.shape[0]:
        raise ad.ShapeError("predict", z.shape, w.shape)
    return ad.matmul(z, w)


def init(
    rng: np.random.Generator,
    sizes: Sequence[int] = (1, 40, 40),
    head: str = "relu",
    scheme: str = "uniform-fan-in",
    input_bias: bool = False,
) -> MetaLearner:
    """Entries of ``W_k`` drawn from ``U[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.

    ``sizes`` lists raw input, hidden and feature widths; the augmented
    input adds one column to ``W_1``.
    """
    if scheme != "uniform-fan-in":
        raise ValueError(f"unknown init scheme {scheme!r}")
    sizes = list(sizes)
    sizes[0] += int(input_bias)
    weights = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return MetaLearner(weights, head, input_bias=input_bias)


def _encode(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def to_checkpoint(h: MetaLearner) -> dict:
    return {
        "format": "slemlab-meta-learner/1",
        "head_activation": h.head,
        "input_bias": h.input_bias,
        "weights": [_encode(w) for w in h.weights],
        "initial_weights": [_encode(w) for w in h.initial],
    }


def from_checkpoint(d: dict) -> MetaLearner:
    if d.get("format") != "slemlab-meta-learner/1":
        raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
    return MetaLearner(
        [_decode(w) for w in d["weights"]],
        d["head_activation"],
        [_decode(w) for w in d["initial_weights"]],
        bool(d.get("input_bias", False)),
    )
