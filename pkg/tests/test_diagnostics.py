import json
import math

import numpy as np
import pytest

from slemlab import model as mdl
from slemlab.diagnostics import (
    BoundConstants,
    LinearBall,
    MLPBall,
    Singleton,
    TrainingSummary,
    bound_report,
    discrepancy,
    excess_slack,
    gaussian_complexity,
    rademacher_complexity,
    rademacher_exact,
)


def _brute_linear_rademacher(x, M):
    """Loop over sign patterns as integers; independent of the library enumerator."""
    n = x.shape[0]
    total = 0.0
    for code in range(2 ** n):
        s = np.array([1.0 if (code >> i) & 1 else -1.0 for i in range(n)])
        total += M / n * math.sqrt(sum(v * v for v in s @ x))
    return total / 2 ** n


def test_linear_sup_matches_closed_form_per_draw():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    est = gaussian_complexity(LinearBall(2.0), x, 500, np.random.default_rng(1))
    g = np.random.default_rng(1).standard_normal((500, 20, 1))
    closed = np.array([2.0 / 20 * np.linalg.norm(gi[:, 0] @ x) for gi in g])
    np.testing.assert_array_equal(est.draws, closed)


def test_linear_sup_is_attained_by_aligned_weight():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 4))
    g = rng.normal(size=(10, 1))
    ball = LinearBall(1.5)
    v = g[:, 0] @ x / 10
    w = 1.5 * v / np.linalg.norm(v)
    assert ball.sup(g, x) == pytest.approx(float(w @ v), rel=1e-14)
    # no other point of the ball does better
    for _ in range(200):
        u = rng.normal(size=4)
        u *= 1.5 / np.linalg.norm(u)
        assert float(u @ v) <= ball.sup(g, x) + 1e-15


def test_monte_carlo_agrees_with_independent_large_run():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(15, 3))
    est = gaussian_complexity(LinearBall(1.0), x, 10_000, np.random.default_rng(4))
    # g^T X is N(0, X^T X); sample it directly through a Cholesky factor
    chol = np.linalg.cholesky(x.T @ x)
    u = np.random.default_rng(5).standard_normal((100_000, 3)) @ chol.T
    vals = np.linalg.norm(u, axis=1) / 15
    oracle_se = vals.std(ddof=1) / math.sqrt(len(vals))
    gap = abs(est.estimate - vals.mean())
    assert gap < 3 * math.hypot(est.stderr, oracle_se)


@pytest.mark.parametrize("n", [1, 4, 8, 12])
def test_rademacher_enumeration_matches_brute_force(n):
    x = np.random.default_rng(n).normal(size=(n, 2))
    assert abs(rademacher_exact(LinearBall(0.7), x) - _brute_linear_rademacher(x, 0.7)) < 1e-10


def test_orthonormal_data_gives_m_over_root_n():
    q, _ = np.linalg.qr(np.random.default_rng(6).normal(size=(8, 8)))
    est = rademacher_complexity(LinearBall(3.0), q[:5], 50, np.random.default_rng(0))
    np.testing.assert_allclose(est.draws, 3.0 / math.sqrt(5), rtol=1e-12)
    assert rademacher_exact(LinearBall(3.0), q[:5]) == pytest.approx(3.0 / math.sqrt(5), rel=1e-12)


def test_zero_radius_and_singleton_classes():
    x = np.random.default_rng(7).normal(size=(6, 2))
    assert rademacher_exact(LinearBall(0.0), x) == 0.0
    single = Singleton(lambda d: d[:, :1] ** 2)
    assert rademacher_exact(single, x) == pytest.approx(0.0, abs=1e-14)
    est = gaussian_complexity(single, x, 2000, np.random.default_rng(8))
    assert abs(est.estimate) < 4 * est.stderr


def test_estimator_reports_stderr_and_validates_draws():
    x = np.ones((4, 1))
    with pytest.raises(ValueError):
        gaussian_complexity(LinearBall(1.0), x, 1, np.random.default_rng(0))
    est = gaussian_complexity(LinearBall(1.0), x, 100, np.random.default_rng(0))
    assert est.n_samples == 100 and est.stderr > 0
    assert not est.lower_bound
    assert set(est.to_json()) == {"estimate", "stderr", "n_samples", "lower_bound"}


def test_enumeration_refuses_large_inputs():
    with pytest.raises(ValueError):
        rademacher_exact(LinearBall(1.0), np.ones((21, 1)))


def test_mlp_ball_is_a_flagged_lower_bound():
    x = np.linspace(-2, 2, 6).reshape(-1, 1)
    ball = MLPBall([(4, 1), (3, 4)], [1.0, 1.0], head="relu", restarts=2, iterations=30)
    est = gaussian_complexity(ball, x, 3, np.random.default_rng(0))
    assert est.lower_bound
    assert np.all(est.draws >= 0)


def test_discrepancy_identical_multisets_is_exactly_zero():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(7, 2))
    y = rng.normal(size=7)
    perm = rng.permutation(7)
    res = discrepancy((x, y), (x[perm], y[perm]), 3.0)
    assert res.value == 0.0


def test_discrepancy_one_dimensional_matches_grid_search():
    rng = np.random.default_rng(10)
    xs, ys = rng.uniform(-2, 2, 5), rng.normal(size=5)
    xq, yq = rng.uniform(-2, 2, 5), rng.normal(size=5)
    M = 1.5
    w = np.linspace(-M, M, 300_001)
    ls = np.mean((np.outer(w, xs) - ys) ** 2, axis=1)
    lq = np.mean((np.outer(w, xq) - yq) ** 2, axis=1)
    grid = float(np.max(np.abs(lq - ls)))
    assert abs(discrepancy((xs, ys), (xq, yq), M).value - grid) < 1e-4


def test_discrepancy_zero_radius_is_target_gap():
    ys, yq = np.array([1.0, 2.0]), np.array([0.0, 3.0])
    res = discrepancy((np.zeros(2), ys), (np.ones(2), yq), 0.0)
    assert res.value == pytest.approx(abs(4.5 - 2.5))


def test_discrepancy_rejects_empty_samples():
    with pytest.raises(ValueError):
        discrepancy((np.zeros(0), np.zeros(0)), (np.ones(2), np.ones(2)), 1.0)


def _state(sigma=0.1, T=100):
    return TrainingSummary(T=T, m=5, n=5, head_max_norms=[2.0] * T, w_norms=[1.0] * T,
                           sigma_min=sigma)


def test_bound_constants_validate_delta():
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            BoundConstants(delta=bad)


@pytest.mark.parametrize("head", ["relu", "tanh"])
def test_bound_report_terms_are_non_negative(head):
    h = mdl.init(np.random.default_rng(0), head=head, input_bias=True)
    rep = bound_report(h, _state())
    for key in ("meta_learner_complexity", "learner_complexity", "confidence_query",
                "confidence_support", "dis_term", "bracket", "total"):
        assert rep.terms[key] >= 0.0
    assert rep.total == pytest.approx(
        rep.terms["diversity_constant"] * rep.terms["bracket"]
        + rep.terms["meta_test_learner_complexity"] + rep.terms["meta_test_confidence"])


def test_tanh_head_bound_is_root_width_and_tighter():
    h = mdl.init(np.random.default_rng(1), head="tanh", input_bias=True)
    rep = bound_report(h, _state())
    assert rep.terms["head_norm_bound"] == pytest.approx(math.sqrt(40))
    assert rep.terms["head_norm_bound"] < rep.terms["head_norm_product_bound"]


def test_zero_sigma_makes_total_unbounded():
    h = mdl.init(np.random.default_rng(2), input_bias=True)
    rep = bound_report(h, _state(sigma=0.0))
    assert rep.total is None and rep.terms["diversity_constant"] is None
    assert "diversity_constant" in rep.flags
    assert excess_slack(rep, 3.0, 1.0) is None


def test_bound_report_json_round_trip():
    h = mdl.init(np.random.default_rng(3), input_bias=True)
    rep = bound_report(h, _state(), BoundConstants(M=2.0, B=10.0, loss_lipschitz=4.0))
    data = json.loads(json.dumps(rep.to_json()))
    assert data["constants"]["M"] == 2.0 and data["constants"]["B"] == 10.0
    assert "lipschitz_F" in data["flags"]
    assert "M" not in data["flags"]


def test_more_tasks_shrink_the_sample_terms():
    h = mdl.init(np.random.default_rng(4), input_bias=True)
    c = BoundConstants(M=1.0)
    small = bound_report(h, _state(T=100), c).terms
    large = bound_report(h, _state(T=10_000), c).terms
    assert large["meta_learner_complexity"] < small["meta_learner_complexity"]
    assert large["confidence_query"] < small["confidence_query"]
