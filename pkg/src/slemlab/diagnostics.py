"""Monte-Carlo complexity estimates, support/query discrepancy and the
term-by-term transfer-error bound for the few-shot regression model."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Protocol, Sequence

import numpy as np

from . import engine as ad
from . import model as mdl


@dataclass
class ComplexityEstimate:
    estimate: float
    stderr: float
    n_samples: int
    lower_bound: bool = False
    draws: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"estimate": self.estimate, "stderr": self.stderr,
                "n_samples": self.n_samples, "lower_bound": self.lower_bound}


class SupOracle(Protocol):
    exact: bool

    def output_dim(self, data: np.ndarray) -> int: ...

    def sup(self, g: np.ndarray, data: np.ndarray) -> float:
        """``sup_e (1/N) sum_i sum_k g[i, k] e_k(data[i])`` for one draw ``g`` of shape (N, r)."""


@dataclass
class LinearBall:
    """``{x -> w^T x : ||w|| <= M}``; the sup is ``(M/N) ||sum_i g_i x_i||``."""

    M: float
    exact: bool = True

    def output_dim(self, data):
        return 1

    def sup(self, g, data):
        data = np.asarray(data, dtype=np.float64)
        return self.M / data.shape[0] * float(np.linalg.norm(g[:, 0] @ data))


@dataclass
class Singleton:
    """A class holding one fixed function ``f`` (vector valued)."""

    f: Callable[[np.ndarray], np.ndarray]
    exact: bool = True

    def _values(self, data):
        v = np.asarray(self.f(np.asarray(data, dtype=np.float64)), dtype=np.float64)
        return v.reshape(len(data), -1)

    def output_dim(self, data):
        return self._values(data).shape[1]

    def sup(self, g, data):
        return float(np.sum(g * self._values(data)) / len(data))


@dataclass
class MLPBall:
    """Bias-free MLPs with ``||W_i||_F <= bounds[i]``, sup found by projected gradient ascent.

    Nonconvex, so the result is only a lower bound on the true supremum.
    """

    shapes: Sequence[tuple[int, int]]
    bounds: Sequence[float]
    head: str = "relu"
    input_bias: bool = False
    restarts: int = 4
    iterations: int = 200
    lr: float = 0.05
    seed: int = 0
    exact: bool = False

    def output_dim(self, data):
        return self.shapes[-1][0]

    def _project(self, ws):
        for w, b in zip(ws, self.bounds):
            nrm = np.linalg.norm(w)
            if nrm > b:
                w *= b / nrm

    def sup(self, g, data):
        data = np.asarray(data, dtype=np.float64)
        n = data.shape[0]
        x = data if data.ndim == 2 else data.reshape(n, -1)
        rng = np.random.default_rng(self.seed)
        best = -math.inf
        gc = ad.const(g / n)
        for _ in range(self.restarts):
            ws = [rng.normal(size=s) for s in self.shapes]
            for w, b in zip(ws, self.bounds):
                w *= b / max(np.linalg.norm(w), 1e-300)
            for _ in range(self.iterations):
                nodes = [ad.param(w) for w in ws]
                obj = ad.total(ad.mul(gc, mdl.features(nodes, x, self.head, self.input_bias)))
                best = max(best, obj.item())
                grads = ad.backward(obj, nodes)
                for w, node, b in zip(ws, nodes, self.bounds):
                    gr = grads[node]
                    w += self.lr * b * gr / max(np.linalg.norm(gr), 1e-300)
                self._project(ws)
            nodes = [ad.const(w) for w in ws]
            val = float(np.sum(g / n * mdl.features(nodes, x, self.head, self.input_bias).value))
            best = max(best, val)
        return best


def _estimate(draw: Callable[[np.random.Generator, tuple], np.ndarray], oracle: SupOracle,
              data, n_mc: int, rng: np.random.Generator) -> ComplexityEstimate:
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2 to estimate a standard error")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    shape = (data.shape[0], oracle.output_dim(data))
    g = np.stack([draw(rng, shape) for _ in range(n_mc)])
    vals = np.array([oracle.sup(gi, data) for gi in g])
    return ComplexityEstimate(
        float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n_mc)),
        n_mc, not oracle.exact, vals,
    )


def _gauss(rng, shape):
    return rng.standard_normal(shape)


def _signs(rng, shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def gaussian_complexity(oracle: SupOracle, data, n_mc: int,
                        rng: np.random.Generator) -> ComplexityEstimate:
    """Empirical Gaussian complexity: mean over draws ``g ~ N(0, I)`` of the class sup."""
    return _estimate(_gauss, oracle, data, n_mc, rng)


def rademacher_complexity(oracle: SupOracle, data, n_mc: int,
                          rng: np.random.Generator) -> ComplexityEstimate:
    """As :func:`gaussian_complexity` with uniform random signs."""
    return _estimate(_signs, oracle, data, n_mc, rng)


def rademacher_exact(oracle: SupOracle, data) -> float:
    """Exact Rademacher complexity by enumerating every sign pattern (small N only)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    shape = (data.shape[0], oracle.output_dim(data))
    count = shape[0] * shape[1]
    if count > 20:
        raise ValueError(f"2^{count} sign patterns is too many to enumerate")
    total = 0.0
    for bits in itertools.product((-1.0, 1.0), repeat=count):
        total += oracle.sup(np.array(bits).reshape(shape), data)
    return total / 2 ** count


@dataclass
class DiscrepancyEstimate:
    value: float
    w: np.ndarray
    lower_bound: bool = True


def _canonical(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    order = np.lexsort((y, *x.T[::-1]))
    return x[order], y[order]


def discrepancy(
    support: tuple[np.ndarray, np.ndarray],
    query: tuple[np.ndarray, np.ndarray],
    M: float,
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None,
    restarts: int = 16,
    iterations: int = 500,
    rng: np.random.Generator | None = None,
) -> DiscrepancyEstimate:
    """``sup_{||w|| <= M} |mean_query (w^T z - y)^2 - mean_support (w^T z - y)^2|``.

    The gap is a quadratic ``w^T A w - 2 b^T w + c``; both signs are maximised
    by projected gradient ascent from ``restarts`` random starts in the ball.
    Samples are put in a canonical order first, so equal multisets give
    exactly 0.
    """
    (xs, ys), (xq, yq) = _canonical(*support), _canonical(*query)
    if len(ys) == 0 or len(yq) == 0:
        raise ValueError("discrepancy needs non-empty support and query samples")
    fmap = feature_map or (lambda x: x)
    zs = np.asarray(fmap(xs), dtype=np.float64).reshape(len(ys), -1)
    zq = np.asarray(fmap(xq), dtype=np.float64).reshape(len(yq), -1)
    a = zq.T @ zq / len(yq) - zs.T @ zs / len(ys)
    b = zq.T @ yq / len(yq) - zs.T @ ys / len(ys)
    c = yq @ yq / len(yq) - ys @ ys / len(ys)
    d = a.shape[0]

    def gap(w):
        return float(w @ a @ w - 2.0 * b @ w + c)

    best_w = np.zeros(d)
    best = abs(gap(best_w))
    if M == 0.0:
        return DiscrepancyEstimate(best, best_w)
    rng = rng or np.random.default_rng(0)
    curv = 2.0 * float(np.max(np.abs(np.linalg.eigvalsh(a)), initial=0.0))
    lip = curv + 2.0 * float(np.linalg.norm(b)) / M + 1e-12
    step = 1.0 / lip if curv > 0 else M / max(2.0 * float(np.linalg.norm(b)), 1e-300)
    for sign in (1.0, -1.0):
        for _ in range(restarts):
            w = rng.normal(size=d)
            w *= M * rng.uniform() ** (1.0 / d) / max(np.linalg.norm(w), 1e-300)
            for _ in range(iterations):
                grad = sign * (2.0 * a @ w - 2.0 * b)
                w_new = w + step * grad
                nrm = np.linalg.norm(w_new)
                if nrm > M:
                    w_new *= M / nrm
                if np.max(np.abs(w_new - w)) < 1e-13 * max(M, 1.0):
                    w = w_new
                    break
                w = w_new
            val = abs(gap(w))
            if val > best:
                best, best_w = val, w.copy()
    return DiscrepancyEstimate(best, best_w)


@dataclass
class BoundConstants:
    """Constants of the transfer-error bound. ``None`` means derive or estimate."""

    delta: float = 0.05
    R: float = 5.0
    M: float | None = None
    y_bound: float = 5.0
    B: float | None = None
    loss_lipschitz: float | None = None
    lipschitz_F: float = 1.0
    m_test: int | None = None

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


@dataclass
class TrainingSummary:
    """What the bound needs from a finished meta-training run."""

    T: int
    m: int
    n: int
    head_max_norms: Sequence[float]
    w_norms: Sequence[float]
    sigma_min: float
    test_head_max_norm: float | None = None
    query_sizes: Sequence[int] | None = None
    test_w_norms: Sequence[float] | None = None


def summarize(result, config) -> TrainingSummary:
    """Build a :class:`TrainingSummary` from a ``bilevel.TrainResult``."""
    return TrainingSummary(
        config.T, config.m, config.n,
        [r.head_max_norm for r in result.log],
        [r.w_norm for r in result.log],
        result.buffer.sigma_min(),
    )


@dataclass
class BoundReport:
    terms: dict
    constants: dict
    flags: dict

    @property
    def total(self) -> float | None:
        return self.terms["total"]

    def to_json(self) -> dict:
        out = dict(self.terms)
        out["constants"] = self.constants
        out["flags"] = self.flags
        return out


def bound_report(h: mdl.MetaLearner, state: TrainingSummary,
                 constants: BoundConstants | None = None) -> BoundReport:
    """Evaluate every term of the transfer-error bound for the current model.

    The meta-learner term uses ``B_i = ||W_i||_F``. ``Dis`` is replaced by its
    upper bound ``4 M max ||h(x)||``. The whole bracket is scaled by the task
    diversity constant ``M / lambda_min(K)``; it is unbounded when
    ``lambda_min(K) = 0``.
    """
    c = constants or BoundConstants()
    flags: dict = {}
    T, m, n = state.T, state.m, state.n
    sizes = list(state.query_sizes) if state.query_sizes is not None else [n] * T
    total_n = float(sum(sizes))
    head_norms = np.asarray(state.head_max_norms, dtype=np.float64)
    head_sup = float(np.max(head_norms)) if head_norms.size else 0.0
    d_l = h.feature_dim
    depth = len(h.weights)

    if c.M is None:
        observed = list(state.w_norms) + list(state.test_w_norms or [])
        M = float(np.max(observed)) if observed else 0.0
        flags["M"] = "data-dependent: max observed ||w|| over training and meta-test"
    else:
        M = float(c.M)
    R = c.R
    if h.input_bias:
        R = math.sqrt(R * R + 1.0)
        flags["R"] = "input augmented with a constant 1; R replaced by sqrt(R^2 + 1)"
    if c.B is None:
        B = (c.y_bound + M * head_sup) ** 2
        flags["B"] = "derived: (y_bound + M max||h(x)||)^2"
    else:
        B = float(c.B)
    if c.loss_lipschitz is None:
        L = 2.0 * (c.y_bound + M * head_sup)
        flags["loss_lipschitz"] = "derived: 2 (y_bound + M max||h(x)||)"
    else:
        L = float(c.loss_lipschitz)
    flags["lipschitz_F"] = "unverified: user supplied, no constructive definition"

    frob = h.frobenius_norms()
    prod_b = float(np.prod(frob))
    log2d = math.log(2.0 / c.delta)
    meta = (768.0 * L * math.log(4.0 * total_n) * c.lipschitz_F * 2.0 * d_l
            * math.sqrt(max(math.log(total_n), 0.0))
            * R * (math.sqrt(2.0 * math.log(2.0) * depth) + 1.0) * prod_b
            / math.sqrt(total_n))
    learner = 6.0 * L * M / (math.sqrt(m) * T) * float(np.sum(head_norms))
    conf_q = 6.0 * B / T * math.sqrt(sum(1.0 / s for s in sizes)) * math.sqrt(log2d / 2.0)
    conf_s = 6.0 * B * math.sqrt(log2d / m)
    dis = 4.0 * M * head_sup
    betas = [s * T / total_n for s in sizes]
    dis_term = 12.0 * L * dis / total_n ** 2 * math.sqrt(sum(1.0 / (b * T) for b in betas))
    bracket = meta + learner + conf_q + conf_s + dis_term

    if state.sigma_min > 0.0:
        diversity = M / state.sigma_min
        scaled = diversity * bracket
    else:
        diversity = None
        scaled = None
        flags["diversity_constant"] = "unbounded: lambda_min(K) = 0"

    m_test = c.m_test or m
    test_head = state.test_head_max_norm if state.test_head_max_norm is not None else head_sup
    test_learner = 6.0 * L * M / math.sqrt(m_test) * test_head
    test_conf = 6.0 * B * math.sqrt(log2d / m_test)
    total = None if scaled is None else scaled + test_learner + test_conf

    product_bound = R * prod_b
    head_bound = math.sqrt(d_l) if h.head == "tanh" else product_bound
    terms = {
        "meta_learner_complexity": meta,
        "learner_complexity": learner,
        "confidence_query": conf_q,
        "confidence_support": conf_s,
        "dis_estimate": dis,
        "dis_term": dis_term,
        "beta_t": betas if len(set(betas)) > 1 else [betas[0]],
        "bracket": bracket,
        "sigma_min": state.sigma_min,
        "diversity_constant": diversity,
        "meta_test_learner_complexity": test_learner,
        "meta_test_confidence": test_conf,
        "total": total,
        "max_head_norm": head_sup,
        "head_norm_bound": head_bound,
        "head_norm_product_bound": product_bound,
        "frobenius_norms": frob,
    }
    consts = {
        "delta": c.delta, "R": R, "M": M, "B": B, "y_bound": c.y_bound,
        "loss_lipschitz": L, "lipschitz_F": c.lipschitz_F, "depth": depth,
        "feature_dim": d_l, "T": T, "m": m, "n": n, "m_test": m_test,
    }
    return BoundReport(terms, consts, flags)


def excess_slack(report: BoundReport, transfer_error: float, best_observed: float) -> float | None:
    """Bound total minus the excess-error proxy ``transfer_error - best_observed``."""
    if report.total is None:
        return None
    return report.total - (transfer_error - best_observed)
