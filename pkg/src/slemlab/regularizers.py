"""Meta-regularization strategies as composable pieces of the bilevel objective.

* ``tanh_head``: the last feature layer uses tanh, so every coordinate of
  ``h(x)`` lies in (-1, 1).
* ``norm``: ridge penalty ``lambda1 ||w||^2`` on the inner problem during
  meta-training and ``lambda2 ||w||^2`` at meta-test.
* ``diversity``: ``-lambda3 * lambda_min(P^T P / |P|)`` on the inner problem,
  with ``P`` a rolling buffer of recent task solutions plus the live ``w``.
* ``l2sp``: ``lambda * sum_j ||W_j - W_j^0||_F^2`` on the outer objective.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import engine as ad
from .linalg import eigh_small, sigma_min_grad


@dataclass(frozen=True)
class NormPenalty:
    train: float = 1.0
    test: float = 1.0


@dataclass(frozen=True)
class DiversityPenalty:
    weight: float = 10.0
    buffer_size: int = 128


@dataclass(frozen=True)
class L2SP:
    weight: float = 0.1


@dataclass(frozen=True)
class RegularizerSpec:
    tanh_head: bool = False
    norm: NormPenalty | None = None
    diversity: DiversityPenalty | None = None
    l2sp: L2SP | None = None

    def __post_init__(self):
        for lam in (
            *(() if self.norm is None else (self.norm.train, self.norm.test)),
            *(() if self.diversity is None else (self.diversity.weight,)),
            *(() if self.l2sp is None else (self.l2sp.weight,)),
        ):
            if lam < 0:
                raise ValueError("regularization weights must be non-negative")

    @property
    def label(self) -> str:
        parts = []
        if self.tanh_head:
            parts.append("Tanh")
        if self.norm is not None:
            parts.append("Norm")
        if self.diversity is not None:
            parts.append("Diverse")
        if self.l2sp is not None:
            parts.append("L2SP")
        return "+".join(parts) if parts else "ReLU"

    def validate(self, feature_dim: int) -> None:
        if self.diversity is not None and self.diversity.buffer_size < feature_dim:
            raise ValueError(
                f"diversity buffer_size {self.diversity.buffer_size} is smaller than "
                f"the feature dimension {feature_dim}; lambda_min would stay 0"
            )

    def to_dict(self) -> dict:
        return {
            "tanh_head": self.tanh_head,
            "norm": None if self.norm is None else asdict(self.norm),
            "diversity": None if self.diversity is None else asdict(self.diversity),
            "l2sp": None if self.l2sp is None else asdict(self.l2sp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RegularizerSpec:
        unknown = set(d) - {"tanh_head", "norm", "diversity", "l2sp"}
        if unknown:
            raise ValueError(f"unknown regularizer keys: {sorted(unknown)}")

        def sub(key, typ):
            v = d.get(key)
            return None if v is None else typ(**v)

        return cls(
            bool(d.get("tanh_head", False)),
            sub("norm", NormPenalty),
            sub("diversity", DiversityPenalty),
            sub("l2sp", L2SP),
        )


STRATEGIES: dict[str, RegularizerSpec] = {
    "ReLU": RegularizerSpec(),
    "Tanh": RegularizerSpec(tanh_head=True),
    "Norm": RegularizerSpec(norm=NormPenalty()),
    "Diverse": RegularizerSpec(diversity=DiversityPenalty()),
    "Tanh+Norm": RegularizerSpec(tanh_head=True, norm=NormPenalty()),
    "L2SP": RegularizerSpec(l2sp=L2SP()),
}

GRID_STRATEGIES = ("ReLU", "Tanh", "Norm", "Diverse", "Tanh+Norm")


def strategy(name: str) -> RegularizerSpec:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; known: {sorted(STRATEGIES)}") from None


def head_activation(spec: RegularizerSpec) -> str:
    return "tanh" if spec.tanh_head else "relu"


def _zero() -> ad.Node:
    return ad.const(0.0)


def norm_weight(spec: RegularizerSpec, stage: str = "train") -> float:
    if spec.norm is None:
        return 0.0
    if stage == "train":
        return spec.norm.train
    if stage == "test":
        return spec.norm.test
    raise ValueError(f"stage must be 'train' or 'test', got {stage!r}")


def inner_penalty(w: ad.Node, spec: RegularizerSpec, stage: str = "train") -> ad.Node:
    lam = norm_weight(spec, stage)
    if lam == 0.0:
        return _zero()
    return ad.scale(ad.sq_frobenius(w), lam)


def outer_penalty(
    weights: Sequence[ad.Node], initial: Sequence[np.ndarray], spec: RegularizerSpec
) -> ad.Node:
    if spec.l2sp is None or spec.l2sp.weight == 0.0:
        return _zero()
    acc = None
    for w, w0 in zip(weights, initial):
        term = ad.sq_frobenius(ad.sub(w, ad.const(w0)))
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, spec.l2sp.weight)


class DiversityBuffer:
    """Most recent task solutions (detached), oldest evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._rows: deque[np.ndarray] = deque(maxlen=capacity)
        self._vectors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, w) -> None:
        row = np.array(w, dtype=np.float64).reshape(-1)
        if row.size != self.dim:
            raise ad.ShapeError("DiversityBuffer.push", row.shape, (self.dim,))
        self._rows.append(row)

    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim))
        return np.stack(self._rows)

    def with_row(self, w) -> np.ndarray:
        return np.vstack([self.matrix(), np.asarray(w, dtype=np.float64).reshape(1, -1)])

    def warming_up(self, extra_rows: int = 1) -> bool:
        return len(self) + extra_rows < self.dim

    def _eig(self, p: np.ndarray):
        # warm start from the previous call: the buffer changes by a row at a time
        res = sigma_min_grad(p, p.shape[0], vectors0=self._vectors)
        if res.vectors is not None:
            self._vectors = res.vectors
        return res

    def sigma_min(self) -> float:
        p = self.matrix()
        if p.shape[0] < self.dim:
            return 0.0
        return self._eig(p).value

    def live_eig(self, w):
        """lambda_min and its eigenvector for the buffer stacked with ``w``."""
        return self._eig(self.with_row(w))


def diversity_term(buffer: DiversityBuffer, current_w: ad.Node, weight: float) -> ad.Node:
    """``-weight * lambda_min(P^T P / |P|)`` with ``P = [buffer; w^T]``.

    Only the live row carries gradient. While the stack has fewer rows than
    ``w`` has entries the eigenvalue is identically 0 and so is the term.
    """
    if weight == 0.0 or buffer.warming_up():
        return _zero()
    wv = current_w.value.reshape(-1)
    res = buffer.live_eig(wv)
    row_grad = res.grad[-1].reshape(-1, 1)

    def vjp(g):
        return (-weight * g[0, 0] * row_grad,)

    return ad.custom("diversity", np.array([[-weight * res.value]]), (current_w,), vjp)


def diversity_curvature(buffer: DiversityBuffer, w, weight: float) -> np.ndarray | None:
    """Matrix ``C`` with ``C @ w`` the gradient of the diversity term in ``w``.

    The gradient is ``-weight * (2/|P|) (v . w) v`` with ``v`` the bottom
    eigenvector. ``v`` is held fixed, which makes the gradient linear in ``w``.
    Returns ``None`` during warm-up.
    """
    if weight == 0.0 or buffer.warming_up():
        return None
    res = buffer.live_eig(np.asarray(w).reshape(-1))
    rows = len(buffer) + 1
    return (-2.0 * weight / rows) * np.outer(res.eigvec, res.eigvec)


def buffer_sigma_min(p: np.ndarray) -> float:
    if p.shape[0] < p.shape[1]:
        return 0.0
    lam, _ = eigh_small(p.T @ p / p.shape[0])
    return float(lam[0])
