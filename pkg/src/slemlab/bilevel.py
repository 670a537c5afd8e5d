"""Episodic bilevel meta-training and meta-test adaptation.

Inner problem (per task, ``w`` starts at 0)::

    min_w  mean_i (w^T h(x_i) - y_i)^2  + lambda1 ||w||^2  - lambda3 lambda_min(P^T P/|P|)

solved by a fixed number of Adam steps written as graph ops, so the adapted
``w*`` stays a differentiable function of the meta-learner weights. The outer
problem is the query-set square loss of ``w*`` (plus the L2-SP penalty when
active), minimised one task at a time with Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace
from typing import Callable, Sequence

import numpy as np

from . import engine as ad
from . import model as mdl
from . import rng as rngmod
from .regularizers import (
    DiversityBuffer,
    RegularizerSpec,
    diversity_curvature,
    diversity_term,
    head_activation,
    inner_penalty,
    norm_weight,
    outer_penalty,
)
from .tasks import EnvironmentConfig, Episode, task_episode

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class Adam:
    """Adam over a list of numpy arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class InnerResult:
    w: ad.Node
    loss_start: float
    loss_end: float


def _inner_loss_np(z: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> float:
    r = z @ w - y
    return float(np.mean(r * r) + lam * np.sum(w * w))


def inner_objective(
    z: ad.Node,
    y,
    w: ad.Node,
    reg: RegularizerSpec,
    buffer: DiversityBuffer | None = None,
    stage: str = "train",
) -> ad.Node:
    """Inner objective as a graph: support MSE plus every active inner penalty.

    :func:`inner_adapt` does not differentiate this node; it writes the same
    gradient in closed form so each update stays a plain graph expression.
    """
    y = ad.const(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    loss = ad.add(ad.mean(ad.square(ad.sub(ad.matmul(z, w), y))), inner_penalty(w, reg, stage))
    if reg.diversity is not None and stage == "train":
        if buffer is None:
            raise ValueError("diversity regularizer needs a DiversityBuffer")
        loss = ad.add(loss, diversity_term(buffer, w, reg.diversity.weight))
    return loss


def inner_adapt(
    z: ad.Node,
    y,
    reg: RegularizerSpec,
    steps: int,
    lr: float,
    buffer: DiversityBuffer | None = None,
) -> InnerResult:
    """Unrolled Adam on the inner objective, starting from ``w = 0``.

    ``z`` is the (m, d) support feature matrix; it may be a constant (frozen
    features) or connected to meta-learner parameters. The returned ``w`` node
    depends on ``z`` through every update.
    """
    m, d = z.shape
    if m < 1:
        raise ValueError("inner_adapt: empty support set")
    if steps < 1:
        raise ValueError("inner_adapt: steps must be >= 1")
    y = ad.const(np.asarray(y, dtype=np.float64).reshape(m, 1))
    lam = norm_weight(reg, "train")
    div_weight = 0.0 if reg.diversity is None else reg.diversity.weight
    if div_weight > 0.0 and buffer is None:
        raise ValueError("diversity regularizer needs a DiversityBuffer")

    zt = ad.transpose(z)
    w = ad.const(np.zeros((d, 1)))
    mom = vel = None
    for k in range(1, steps + 1):
        resid = ad.sub(ad.matmul(z, w), y)
        g = ad.scale(ad.matmul(zt, resid), 2.0 / m)
        if lam > 0.0:
            g = ad.add(g, ad.scale(w, 2.0 * lam))
        if div_weight > 0.0:
            curv = diversity_curvature(buffer, w.value, div_weight)
            if curv is not None:
                g = ad.add(g, ad.matmul(ad.const(curv), w))
        g2 = ad.square(g)
        if mom is None:
            mom = ad.scale(g, 1.0 - BETA1)
            vel = ad.scale(g2, 1.0 - BETA2)
        else:
            mom = ad.add(ad.scale(mom, BETA1), ad.scale(g, 1.0 - BETA1))
            vel = ad.add(ad.scale(vel, BETA2), ad.scale(g2, 1.0 - BETA2))
        mhat = ad.scale(mom, 1.0 / (1.0 - BETA1 ** k))
        vhat = ad.scale(vel, 1.0 / (1.0 - BETA2 ** k))
        step = ad.div(mhat, ad.add_scalar(ad.sqrt(vhat), EPS))
        w = ad.sub(w, ad.scale(step, lr))
    zv, yv = z.value, y.value
    return InnerResult(
        w,
        _inner_loss_np(zv, yv, np.zeros((d, 1)), lam),
        _inner_loss_np(zv, yv, w.value, lam),
    )


@dataclass
class OuterObjective:
    loss: ad.Node
    query_loss: float
    w: ad.Node
    support_features: ad.Node
    inner: InnerResult


def outer_objective(
    weights: Sequence[ad.Node],
    initial: Sequence[np.ndarray],
    episode: Episode,
    reg: RegularizerSpec,
    steps: int,
    lr: float,
    buffer: DiversityBuffer | None = None,
    input_bias: bool = False,
) -> OuterObjective:
    if episode.n < 1:
        raise ValueError("outer objective: empty query set")
    head = head_activation(reg)
    zs = mdl.features(weights, episode.support_x, head, input_bias)
    inner = inner_adapt(zs, episode.support_y, reg, steps, lr, buffer)
    zq = mdl.features(weights, episode.query_x, head, input_bias)
    resid = ad.sub(mdl.predict(inner.w, zq), ad.const(episode.query_y.reshape(-1, 1)))
    query = ad.mean(ad.square(resid))
    loss = ad.add(query, outer_penalty(weights, initial, reg))
    return OuterObjective(loss, query.item(), inner.w, zs, inner)


@dataclass
class StepRecord:
    task_index: int
    query_loss: float
    w_norm: float
    sigma_min_buffer: float | None
    head_max_norm: float
    inner_loss_start: float
    inner_loss_end: float

    def to_json(self) -> dict:
        d = asdict(self)
        return d


def outer_step(
    h: mdl.MetaLearner,
    episode: Episode,
    reg: RegularizerSpec,
    adam: Adam,
    steps: int,
    lr: float,
    buffer: DiversityBuffer | None = None,
) -> OuterObjective:
    """Backprop the outer loss through the unrolled inner loop; one Adam step on ``h``."""
    nodes = mdl.param_nodes(h)
    obj = outer_objective(nodes, h.initial, episode, reg, steps, lr, buffer, h.input_bias)
    grads = ad.backward(obj.loss, nodes)
    adam.step(h.weights, [grads[n] for n in nodes])
    return obj


@dataclass
class TrainConfig:
    T: int = 1000
    m: int = 5
    n: int = 5
    inner_steps: int = 20
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    seed: int = 0
    sizes: tuple[int, ...] = (1, 40, 40)
    input_bias: bool = True
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    buffer_size: int = 128
    sigma_log_every: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.m < 1 or self.n < 1:
            raise ValueError("meta-training needs m >= 1 and n >= 1")
        self.regularizer.validate(self.sizes[-1])

    def env(self) -> EnvironmentConfig:
        e = self.environment
        return EnvironmentConfig(e.amplitude_range, e.frequency_range, e.x_range,
                                 self.m, self.n, self.seed)


@dataclass
class TrainResult:
    h: mdl.MetaLearner
    log: list[StepRecord]
    buffer: DiversityBuffer


def new_meta_learner(config: TrainConfig) -> mdl.MetaLearner:
    return mdl.init(rngmod.stream(config.seed, rngmod.INIT), config.sizes,
                    head_activation(config.regularizer), input_bias=config.input_bias)


def meta_train(
    config: TrainConfig,
    callback: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """One episode per task, tasks in index order, one Adam step on ``h`` per task."""
    reg = config.regularizer
    h = new_meta_learner(config)
    adam = Adam(h.weights, config.outer_lr)
    capacity = reg.diversity.buffer_size if reg.diversity is not None else config.buffer_size
    buffer = DiversityBuffer(capacity, h.feature_dim)
    env = config.env()
    log = []
    for t in range(config.T):
        episode = task_episode(env, rngmod.TRAIN_TASKS, t)
        obj = outer_step(h, episode, reg, adam, config.inner_steps, config.inner_lr, buffer)
        w_star = obj.w.value.reshape(-1)
        buffer.push(w_star)
        head_max = float(np.max(np.linalg.norm(obj.support_features.value, axis=1)))
        every = config.sigma_log_every
        last = t == config.T - 1
        sig = buffer.sigma_min() if last or (every and (t + 1) % every == 0) else None
        rec = StepRecord(t, obj.query_loss, float(np.linalg.norm(w_star)), sig, head_max,
                         obj.inner.loss_start, obj.inner.loss_end)
        log.append(rec)
        if callback is not None:
            callback(rec)
    return TrainResult(h, log, buffer)


@dataclass
class AdaptResult:
    w: np.ndarray
    steps: np.ndarray
    loss: np.ndarray


def meta_test_adapt_batch(
    z: np.ndarray,
    y: np.ndarray,
    lam: float = 0.0,
    lr: float = 0.01,
    max_steps: int = 5000,
    window: int = 50,
    tol: float = 1e-8,
) -> AdaptResult:
    """Adam to convergence on a batch of independent ridge problems.

    ``z`` has shape (B, m, d), ``y`` shape (B, m). A task stops once its inner
    loss improved by less than ``tol`` over the last ``window`` steps, or after
    ``max_steps``. Each task's trajectory is independent of the rest of the
    batch, so any batching gives the same per-task result.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 3 or y.shape != z.shape[:2]:
        raise ad.ShapeError("meta_test_adapt", z.shape, y.shape)
    b, m, d = z.shape
    if m < 1:
        raise ValueError("meta_test_adapt: empty support set")
    w = np.zeros((b, d))
    mom = np.zeros((b, d))
    vel = np.zeros((b, d))
    steps = np.zeros(b, dtype=np.int64)
    history = np.empty((window + 1, b))
    active = np.ones(b, dtype=bool)

    def loss_and_grad(ww, zz, yy):
        r = np.einsum("bmd,bd->bm", zz, ww) - yy
        loss = np.mean(r * r, axis=1) + lam * np.sum(ww * ww, axis=1)
        grad = (2.0 / m) * np.einsum("bmd,bm->bd", zz, r) + 2.0 * lam * ww
        return loss, grad

    loss, grad = loss_and_grad(w, z, y)
    history[0] = loss
    k = 0
    while active.any() and k < max_steps:
        k += 1
        idx = np.flatnonzero(active)
        g = grad[idx]
        mom[idx] = BETA1 * mom[idx] + (1.0 - BETA1) * g
        vel[idx] = BETA2 * vel[idx] + (1.0 - BETA2) * g * g
        mhat = mom[idx] / (1.0 - BETA1 ** k)
        vhat = vel[idx] / (1.0 - BETA2 ** k)
        w[idx] = w[idx] - lr * mhat / (np.sqrt(vhat) + EPS)
        steps[idx] = k
        new_loss, new_grad = loss_and_grad(w[idx], z[idx], y[idx])
        loss[idx] = new_loss
        grad[idx] = new_grad
        history[k % (window + 1), idx] = new_loss
        if k >= window:
            old = history[(k - window) % (window + 1), idx]
            done = (old - new_loss) < tol
            active[idx[done]] = False
    return AdaptResult(w, steps, loss)


def meta_test_adapt(
    h: mdl.MetaLearner,
    support_x,
    support_y,
    reg: RegularizerSpec,
    lr: float = 0.01,
    max_steps: int = 5000,
) -> np.ndarray:
    """Solve the meta-test inner problem for one task with ``h`` frozen."""
    xs = np.asarray(support_x, dtype=np.float64).reshape(-1)
    if xs.size == 0:
        raise ValueError("meta_test_adapt: empty support set")
    z = h.features(xs)[None]
    y = np.asarray(support_y, dtype=np.float64).reshape(1, -1)
    res = meta_test_adapt_batch(z, y, norm_weight(reg, "test"), lr, max_steps)
    return res.w[0]


def ridge_solution(z: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Closed form ``(Z^T Z + m lam I)^{-1} Z^T y`` solved via the Jacobi eigensolver."""
    from .linalg import eigh_small

    z = np.asarray(z, dtype=np.float64)
    m, d = z.shape
    a = z.T @ z + m * lam * np.eye(d)
    lam_, vecs = eigh_small(0.5 * (a + a.T))
    rhs = vecs.T @ (z.T @ np.asarray(y, dtype=np.float64).reshape(-1))
    return vecs @ (rhs / lam_)


def quadratic_toy_hypergradient(h: float, a: float, c: float, steps: int, lr: float) -> float:
    """Unrolled hypergradient for inner ``(w - a h)^2`` and outer ``(w* - c)^2``."""
    hn = ad.param(h)
    z = ad.scale(hn, a)
    w = ad.const(0.0)
    mom = vel = None
    for k in range(1, steps + 1):
        g = ad.scale(ad.sub(w, z), 2.0)
        g2 = ad.square(g)
        if mom is None:
            mom = ad.scale(g, 1.0 - BETA1)
            vel = ad.scale(g2, 1.0 - BETA2)
        else:
            mom = ad.add(ad.scale(mom, BETA1), ad.scale(g, 1.0 - BETA1))
            vel = ad.add(ad.scale(vel, BETA2), ad.scale(g2, 1.0 - BETA2))
        mhat = ad.scale(mom, 1.0 / (1.0 - BETA1 ** k))
        vhat = ad.scale(vel, 1.0 / (1.0 - BETA2 ** k))
        w = ad.sub(w, ad.scale(ad.div(mhat, ad.add_scalar(ad.sqrt(vhat), EPS)), lr))
    outer = ad.square(ad.add_scalar(w, -c))
    return float(ad.backward(outer, [hn])[hn][0, 0])


def mean_query_loss(
    h: mdl.MetaLearner,
    episodes: Sequence[Episode],
    reg: RegularizerSpec,
    steps: int = 20,
    lr: float = 0.01,
) -> float:
    """Average training-procedure query loss of a frozen ``h`` over fixed episodes."""
    nodes = [ad.const(w) for w in h.weights]
    reg = replace(reg, diversity=None)
    return float(np.mean([
        outer_objective(nodes, h.initial, ep, reg, steps, lr, None, h.input_bias).query_loss
        for ep in episodes
    ]))
