"""Follow-the-meta-leader over a stream of tasks, and its regret.

Each round adapts the learner with one gradient step from ``f = 0``, pays
the query loss of the adapted learner, then moves the meta-learner to the
minimiser of the summed losses of every round seen so far.

Two instantiations are provided. ``convex-quadratic`` has a scalar
meta-learner ``h``, inner loss ``(f - h)^2 / 2`` and query loss
``(f - c_t)^2`` with ``c_t ~ U[-1, 1]``. One inner step of size ``alpha``
gives ``f = alpha h``, so ``l_t(h) = (alpha h - c_t)^2`` and the leader is
``mean(c_1..c_t) / alpha`` in closed form. ``mlp`` uses the sinusoid tasks
with the MLP feature extractor and a linear head; the leader is
approximated by Adam on the stored history.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from . import engine as ad
from . import model as mdl
from . import rng as rngmod
from .bilevel import Adam
from .tasks import EnvironmentConfig, Episode, task_episode

INSTANTIATIONS = ("convex-quadratic", "mlp")


@dataclass(frozen=True)
class OnlineConfig:
    T: int = 100
    alpha: float = 1.0
    instantiation: str = "convex-quadratic"
    seed: int = 0
    h_init: float = 0.0
    c_range: tuple[float, float] = (-1.0, 1.0)
    ftl_max_epochs: int = 500
    ftl_tol: float = 1e-8
    ftl_window: int = 10
    ftl_lr: float = 0.001
    sizes: tuple[int, ...] = (1, 40, 40)
    input_bias: bool = True
    chunk: int = 256

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.instantiation not in INSTANTIATIONS:
            raise ValueError(f"unknown instantiation {self.instantiation!r}")
        if self.instantiation == "mlp" and self.T > 10_000:
            raise ValueError("the MLP instantiation stores every round; T is capped at 10000")
        lo, hi = self.c_range
        if not lo <= hi:
            raise ValueError("c_range must be (low, high) with low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_range"] = list(self.c_range)
        d["sizes"] = list(self.sizes)
        return d


@dataclass
class RegretTrace:
    """Per-round record of an online run.

    ``ftl_objective[t]`` is ``min_h sum_{k<=t} l_k(h)`` (exact for the convex
    instance, the optimiser's value otherwise), so ``running_regret[t]`` is
    ``R_{t+1}`` measured against the comparator of the first ``t + 1`` rounds.
    """

    losses: np.ndarray
    ftl_objective: np.ndarray
    iterates: np.ndarray | None = None
    gradient_norms: np.ndarray | None = None
    approximate_comparator: bool = False

    @property
    def T(self) -> int:
        return len(self.losses)

    @property
    def comparator(self) -> float:
        return float(self.ftl_objective[-1])

    @property
    def running_regret(self) -> np.ndarray:
        return np.cumsum(self.losses) - self.ftl_objective

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "loss_incurred", "ftl_objective_value", "running_regret"])
        for t, (l, f, r) in enumerate(zip(self.losses, self.ftl_objective,
                                          self.running_regret), start=1):
            w.writerow([t, repr(float(l)), repr(float(f)), repr(float(r))])
        return buf.getvalue()


@dataclass
class Regret:
    total: float
    average: np.ndarray
    approximate_comparator: bool


def regret(trace: RegretTrace) -> Regret:
    """``R_T`` and the running average ``R_t / t``."""
    r = trace.running_regret
    return Regret(float(r[-1]), r / np.arange(1, len(r) + 1), trace.approximate_comparator)


def regret_bound(G: float, tau: float, T: int) -> float:
    """Regret guarantee ``4 G^2 (1 + log T) / tau`` for tau-strongly convex, G-Lipschitz losses."""
    return 4.0 * G * G * (1.0 + math.log(T)) / tau


def convex_targets(config: OnlineConfig) -> np.ndarray:
    lo, hi = config.c_range
    return rngmod.stream(config.seed, rngmod.ONLINE, 0).uniform(lo, hi, size=config.T)


def convex_run(config: OnlineConfig, targets: Sequence[float] | None = None) -> RegretTrace:
    """FTML on ``l_t(h) = (alpha h - c_t)^2``; every quantity is closed form."""
    c = np.asarray(convex_targets(config) if targets is None else targets, dtype=np.float64)
    a = config.alpha
    T = len(c)
    losses = np.empty(T)
    ftl = np.empty(T)
    iterates = np.empty(T)
    grads = np.empty(T)
    h = float(config.h_init)
    running = 0.0
    for t in range(T):
        iterates[t] = h
        r = a * h - c[t]
        losses[t] = r * r
        grads[t] = abs(2.0 * a * r)
        running += c[t]
        mean = running / (t + 1)
        h = mean / a
        # sum_k (c_k - mean)^2 evaluated from a centred sum for accuracy
        ftl[t] = float(np.sum((c[: t + 1] - mean) ** 2))
    return RegretTrace(losses, ftl, iterates, grads, False)


def strong_convexity(config: OnlineConfig) -> float:
    """``tau`` of ``l_t(h) = (alpha h - c)^2``, whose second derivative is ``2 alpha^2``."""
    return 2.0 * config.alpha ** 2


# MLP instantiation

def _one_step_head(zs: ad.Node, ys: np.ndarray, alpha: float, t: int, m: int) -> ad.Node:
    """Row ``k`` is ``alpha * (2/m) Z_k^T y_k``, one gradient step from ``w = 0``."""
    sel = np.zeros((t, t * m))
    for k in range(t):
        sel[k, k * m:(k + 1) * m] = (2.0 * alpha / m) * ys[k]
    return ad.matmul(ad.const(sel), zs)


def _history_loss(weights: Sequence[ad.Node], eps: Sequence[Episode], alpha: float,
                  input_bias: bool, head: str) -> ad.Node:
    t = len(eps)
    m = eps[0].m
    n = eps[0].n
    xs = np.concatenate([e.support_x for e in eps])
    ys = np.stack([e.support_y for e in eps])
    xq = np.concatenate([e.query_x for e in eps])
    yq = np.concatenate([e.query_y for e in eps]).reshape(-1, 1)
    zs = mdl.features(weights, xs, head, input_bias)
    zq = mdl.features(weights, xq, head, input_bias)
    w = _one_step_head(zs, ys, alpha, t, m)
    expand = np.zeros((t * n, t))
    for k in range(t):
        expand[k * n:(k + 1) * n, k] = 1.0
    wrep = ad.matmul(ad.const(expand), w)
    pred = ad.matmul(ad.mul(zq, wrep), ad.const(np.ones((zq.shape[1], 1))))
    return ad.scale(ad.total(ad.square(ad.sub(pred, ad.const(yq)))), 1.0 / n)


def mlp_history_loss(h: mdl.MetaLearner, eps: Sequence[Episode], alpha: float,
                     chunk: int = 256) -> float:
    """``sum_k l_k(h)`` over stored rounds, with ``l_k`` the post-step query loss."""
    nodes = [ad.const(w) for w in h.weights]
    return sum(_history_loss(nodes, eps[s:s + chunk], alpha, h.input_bias, h.head).item()
               for s in range(0, len(eps), chunk))


def _history_grad(h: mdl.MetaLearner, eps: Sequence[Episode], alpha: float, chunk: int):
    grads = [np.zeros_like(w) for w in h.weights]
    value = 0.0
    for s in range(0, len(eps), chunk):
        nodes = [ad.param(w) for w in h.weights]
        loss = _history_loss(nodes, eps[s:s + chunk], alpha, h.input_bias, h.head)
        g = ad.backward(loss, nodes)
        value += loss.item()
        for acc, node in zip(grads, nodes):
            acc += g[node]
    return value, grads


def ftl_fit(h: mdl.MetaLearner, eps: Sequence[Episode], config: OnlineConfig) -> float:
    """Adam on the summed history loss, in place, until the improvement over
    ``ftl_window`` epochs falls below ``ftl_tol`` (relative) or the epoch cap."""
    adam = Adam(h.weights, config.ftl_lr)
    history = []
    best = math.inf
    for _ in range(config.ftl_max_epochs):
        value, grads = _history_grad(h, eps, config.alpha, config.chunk)
        history.append(value)
        best = min(best, value)
        if len(history) > config.ftl_window:
            old = history[-1 - config.ftl_window]
            if old - value < config.ftl_tol * max(1.0, abs(old)):
                break
        adam.step(h.weights, grads)
    return mlp_history_loss(h, eps, config.alpha, config.chunk)


def mlp_run(config: OnlineConfig, env: EnvironmentConfig | None = None) -> RegretTrace:
    """FTML with the MLP feature extractor; the comparator is approximate."""
    env = env or EnvironmentConfig(seed=config.seed)
    h = mdl.init(rngmod.stream(config.seed, rngmod.ONLINE, 1), config.sizes,
                 input_bias=config.input_bias)
    eps: list[Episode] = []
    losses = np.empty(config.T)
    ftl = np.empty(config.T)
    for t in range(config.T):
        ep = task_episode(env, rngmod.ONLINE, t)
        losses[t] = mlp_history_loss(h, [ep], config.alpha, config.chunk)
        eps.append(ep)
        ftl[t] = ftl_fit(h, eps, config)
    return RegretTrace(losses, ftl, None, None, True)


def ftml_run(config: OnlineConfig, env: EnvironmentConfig | None = None) -> RegretTrace:
    if config.instantiation == "convex-quadratic":
        return convex_run(config)
    return mlp_run(config, env)
