"""Central finite-difference checks for every differentiable op.

Each case maps a parameter matrix to a scalar by contracting the op's output
with a fixed random matrix, so the whole Jacobian is exercised, not only its
row sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as ad
from .linalg import sigma_min, sigma_min_grad

SHAPE = (3, 4)
TOLERANCE = 1e-5
EIGENGAP_MIN = 1e-3


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[ad.Node], ad.Node], np.ndarray]]


def _contract(out: ad.Node, rng: np.random.Generator) -> Callable[[ad.Node], ad.Node]:
    weights = ad.const(rng.normal(size=out.shape))
    return lambda node: ad.total(ad.mul(node, weights))


def _unary(op):
    def build(rng):
        x = rng.normal(size=SHAPE)
        probe = _contract(op(ad.const(x)), rng)
        return (lambda p: probe(op(p))), x
    return build


def _binary(op, other_shape=SHAPE, positive_other=False, left=True):
    def build(rng):
        x = rng.normal(size=SHAPE)
        y = rng.normal(size=other_shape)
        if positive_other:
            y = np.abs(y) + 0.5
        other = ad.const(y)
        f = (lambda p: op(p, other)) if left else (lambda p: op(other, p))
        probe = _contract(f(ad.const(x)), rng)
        return (lambda p: probe(f(p))), x
    return build


def _away_from_kink(op, margin=1e-2):
    def build(rng):
        x = rng.normal(size=SHAPE)
        x = np.where(np.abs(x) < margin, np.copysign(margin, x), x)
        probe = _contract(op(ad.const(x)), rng)
        return (lambda p: probe(op(p))), x
    return build


def _positive(op):
    def build(rng):
        x = np.abs(rng.normal(size=SHAPE)) + 0.5
        probe = _contract(op(ad.const(x)), rng)
        return (lambda p: probe(op(p))), x
    return build


def _reduction(op):
    def build(rng):
        return op, rng.normal(size=SHAPE)
    return build


def _sigma_min_case(rng):
    """``lambda_min(P^T P / T)`` through the custom eigen-gradient, gap > 1e-3."""
    rows, cols = 8, 4
    while True:
        p = rng.normal(size=(rows, cols))
        res = sigma_min_grad(p, rows)
        if res.eigengap > EIGENGAP_MIN:
            break

    def f(node):
        v = node.value
        if not node.requires_grad:
            return ad.const(np.array([[sigma_min(v, rows)]]))
        g = sigma_min_grad(v, rows).grad
        return ad.custom("sigma_min", np.array([[sigma_min(v, rows)]]), (node,),
                         lambda up: (up[0, 0] * g,))
    return f, p


CASES: tuple[Case, ...] = (
    Case("matmul_left", _binary(ad.matmul, other_shape=(4, 2))),
    Case("matmul_right", _binary(ad.matmul, other_shape=(2, 3), left=False)),
    Case("add", _binary(ad.add)),
    Case("sub", _binary(ad.sub)),
    Case("mul", _binary(ad.mul)),
    Case("div_numerator", _binary(ad.div, positive_other=True)),
    Case("div_denominator", _positive(lambda p: ad.div(ad.const(np.ones(SHAPE) * 1.7), p))),
    Case("scale", _unary(lambda p: ad.scale(p, -2.5))),
    Case("add_scalar", _unary(lambda p: ad.add_scalar(p, 0.3))),
    Case("neg", _unary(ad.neg)),
    Case("transpose", _unary(ad.transpose)),
    Case("relu", _away_from_kink(ad.relu)),
    Case("tanh", _unary(ad.tanh)),
    Case("square", _unary(ad.square)),
    Case("sqrt", _positive(ad.sqrt)),
    Case("total", _reduction(ad.total)),
    Case("mean", _reduction(ad.mean)),
    Case("sq_frobenius", _reduction(ad.sq_frobenius)),
    Case("sigma_min", _sigma_min_case),
)


def run_suite(points: int = 100, seed: int = 0, step: float = 1e-4) -> dict[str, float]:
    """Worst relative error per case over ``points`` seeded points."""
    out = {}
    for i, case in enumerate(CASES):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(points):
            f, x = case.build(rng)
            worst = max(worst, ad.grad_check(f, x, step))
        out[case.name] = worst
    return out
