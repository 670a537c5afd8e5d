import numpy as np
import pytest

from slemlab import engine as ad
from slemlab import model as mdl
from slemlab import rng as rngmod
from slemlab.bilevel import (
    EPS,
    Adam,
    TrainConfig,
    inner_adapt,
    inner_objective,
    mean_query_loss,
    meta_test_adapt,
    meta_test_adapt_batch,
    meta_train,
    outer_objective,
    outer_step,
    quadratic_toy_hypergradient,
    ridge_solution,
)
from slemlab.regularizers import (
    DiversityBuffer,
    DiversityPenalty,
    RegularizerSpec,
    strategy,
)
from slemlab.tasks import EnvironmentConfig, Episode, SineTask, task_episode

ENV = EnvironmentConfig()


def _features(seed=0):
    return mdl.init(rngmod.stream(seed, rngmod.INIT), input_bias=True)


def test_adam_hand_traced_scalar():
    p = np.array([1.0])
    adam = Adam([p], lr=0.1)
    grads = [1.0, -2.0, 0.5]
    # m_k, v_k recurrences written out by hand
    m1, v1 = 0.1 * 1.0, 0.001 * 1.0
    x1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.001) ** 0.5 + EPS)
    m2, v2 = 0.9 * m1 + 0.1 * -2.0, 0.999 * v1 + 0.001 * 4.0
    x2 = x1 - 0.1 * (m2 / (1 - 0.81)) / ((v2 / (1 - 0.999 ** 2)) ** 0.5 + EPS)
    m3, v3 = 0.9 * m2 + 0.1 * 0.5, 0.999 * v2 + 0.001 * 0.25
    x3 = x2 - 0.1 * (m3 / (1 - 0.729)) / ((v3 / (1 - 0.999 ** 3)) ** 0.5 + EPS)
    expected = [x1, x2, x3]
    for g, want in zip(grads, expected):
        adam.step([p], [np.array([g])])
        assert abs(p[0] - want) < 1e-12


def test_adam_zero_gradient_does_not_move():
    p = np.array([[1.0, -2.0]])
    adam = Adam([p], lr=0.1)
    adam.step([p], [np.zeros_like(p)])
    assert np.array_equal(p, [[1.0, -2.0]])


def test_quadratic_toy_hypergradient_converges_monotonically():
    h, a, c = 1.0, 0.5, 0.2
    exact = 2 * a * (a * h - c)
    errs = [abs(quadratic_toy_hypergradient(h, a, c, s, 0.01) - exact) / abs(exact)
            for s in (10, 50, 200, 500)]
    assert errs[-1] < 1e-3
    assert all(x > y for x, y in zip(errs, errs[1:]))


def test_ridge_oracle_on_frozen_features():
    h = _features()
    for i in range(5):
        ep = task_episode(ENV, rngmod.MISC, i)
        z = h.features(ep.support_x)
        w = inner_adapt(ad.const(z), ep.support_y, strategy("Norm"), 2000, 0.01).w.value.ravel()
        assert np.abs(w - ridge_solution(z, ep.support_y, 1.0)).max() < 1e-3


def test_ridge_solution_matches_linear_solve():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(5, 40)), rng.normal(size=5)
    ref = np.linalg.solve(z.T @ z + 5 * 0.7 * np.eye(40), z.T @ y)
    np.testing.assert_allclose(ridge_solution(z, y, 0.7), ref, rtol=1e-9, atol=1e-12)


def test_zero_targets_keep_w_at_zero():
    z = ad.const(_features().features(np.linspace(-4, 4, 5)))
    res = inner_adapt(z, np.zeros(5), RegularizerSpec(), 20, 0.01)
    assert np.all(res.w.value == 0.0)
    assert np.all(z.value @ res.w.value == 0.0)


def test_inner_loss_decreases_at_convergence_settings():
    h = _features(1)
    for i in range(10):
        ep = task_episode(ENV, rngmod.MISC, i)
        res = inner_adapt(ad.const(h.features(ep.support_x)), ep.support_y,
                          RegularizerSpec(), 200, 0.01)
        assert res.loss_end <= res.loss_start


def test_inner_adapt_errors():
    with pytest.raises(ValueError):
        inner_adapt(ad.const(np.zeros((0, 3))), np.zeros(0), RegularizerSpec(), 5, 0.01)
    with pytest.raises(ValueError):
        inner_adapt(ad.const(np.ones((2, 3))), np.zeros(2), strategy("Diverse"), 5, 0.01)


@pytest.mark.parametrize("name", ["ReLU", "Norm", "Diverse"])
def test_closed_form_inner_gradient_matches_autodiff(name):
    """The hand-written update must equal Adam driven by backprop of the inner objective."""
    rng = np.random.default_rng(2)
    d = 6
    reg = strategy(name)
    if reg.diversity is not None:
        reg = RegularizerSpec(diversity=DiversityPenalty(10.0, 32))
    z = rng.normal(size=(5, d))
    y = rng.normal(size=5)
    rows = rng.normal(size=(12, d))

    def buf():
        b = DiversityBuffer(32, d)
        for r in rows:
            b.push(r)
        return b

    unrolled = inner_adapt(ad.const(z), y, reg, 15, 0.01, buf()).w.value
    w = np.zeros((d, 1))
    adam = Adam([w], 0.01)
    ref_buf = buf()
    for _ in range(15):
        node = ad.param(w.copy())
        g = ad.backward(inner_objective(ad.const(z), y, node, reg, ref_buf), [node])[node]
        adam.step([w], [g])
    np.testing.assert_allclose(unrolled, w, rtol=1e-9, atol=1e-12)


def _tiny_setup(seed=0):
    rng = np.random.default_rng(seed)
    h = mdl.MetaLearner([rng.uniform(-1, 1, size=(3, 1)), rng.uniform(-0.6, 0.6, size=(3, 3))])
    ep = task_episode(ENV, rngmod.MISC, seed)
    return h, ep


@pytest.mark.parametrize("name", ["ReLU", "Tanh", "Norm", "L2SP"])
def test_outer_gradient_matches_finite_differences(name):
    reg = strategy(name)
    h, ep = _tiny_setup(3)
    h = mdl.MetaLearner(h.weights, "tanh" if reg.tanh_head else "relu")
    h.weights[1] += 0.05  # move away from the L2-SP anchor
    for k in range(2):
        def f(node, k=k):
            nodes = [ad.const(w) for w in h.weights]
            nodes[k] = node
            return outer_objective(nodes, h.initial, ep, reg, 5, 0.01).loss

        assert ad.grad_check(f, h.weights[k]) < 1e-4


def test_outer_step_with_zero_gradient_leaves_h_unchanged():
    h = _features(2)
    before = [w.copy() for w in h.weights]
    x = np.linspace(-3, 3, 5)
    ep = Episode(SineTask(0.0, 1.0), x, np.zeros(5), x + 0.1, np.zeros(5))
    outer_step(h, ep, RegularizerSpec(), Adam(h.weights, 0.001), 5, 0.01)
    for a, b in zip(before, h.weights):
        assert np.array_equal(a, b)


def test_empty_query_raises():
    h = _features()
    ep = Episode(SineTask(1.0, 1.0), np.zeros(3), np.zeros(3), np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        outer_objective(mdl.param_nodes(h), h.initial, ep, RegularizerSpec(), 3, 0.01,
                        input_bias=True)


def test_l2sp_penalty_zero_at_initialization():
    h = _features()
    ep = task_episode(ENV, rngmod.MISC, 0)
    a = outer_objective(mdl.param_nodes(h), h.initial, ep, strategy("L2SP"), 5, 0.01,
                        input_bias=True)
    b = outer_objective(mdl.param_nodes(h), h.initial, ep, RegularizerSpec(), 5, 0.01,
                        input_bias=True)
    assert a.loss.item() == b.loss.item()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_meta_train_reduces_query_loss(seed):
    cfg = TrainConfig(T=100, seed=seed, sigma_log_every=0)
    res = meta_train(cfg)
    held_out = [task_episode(cfg.env(), rngmod.MISC, i) for i in range(200)]
    start = mdl.MetaLearner([w.copy() for w in res.h.initial], res.h.head,
                            input_bias=res.h.input_bias)
    reg = cfg.regularizer
    assert mean_query_loss(res.h, held_out, reg) < mean_query_loss(start, held_out, reg)


def test_meta_train_is_bit_identical():
    a = meta_train(TrainConfig(T=15, seed=4))
    b = meta_train(TrainConfig(T=15, seed=4))
    for wa, wb in zip(a.h.weights, b.h.weights):
        assert wa.tobytes() == wb.tobytes()
    assert [r.to_json() for r in a.log] == [r.to_json() for r in b.log]


def test_training_log_fields():
    res = meta_train(TrainConfig(T=5, sigma_log_every=2))
    rec = res.log[1].to_json()
    for key in ("task_index", "query_loss", "w_norm", "sigma_min_buffer", "head_max_norm"):
        assert key in rec
    assert res.log[0].sigma_min_buffer is None
    assert res.log[-1].sigma_min_buffer is not None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(T=0)
    with pytest.raises(ValueError):
        TrainConfig(inner_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(regularizer=RegularizerSpec(diversity=DiversityPenalty(10.0, 8)))


def test_meta_test_adapt_is_repeatable_and_shrinks_with_ridge():
    h = _features(3)
    for i in range(5):
        ep = task_episode(ENV, rngmod.TEST_TASKS, i)
        w1 = meta_test_adapt(h, ep.support_x, ep.support_y, RegularizerSpec())
        w2 = meta_test_adapt(h, ep.support_x, ep.support_y, RegularizerSpec())
        assert np.array_equal(w1, w2)
        wr = meta_test_adapt(h, ep.support_x, ep.support_y, strategy("Norm"))
        assert np.linalg.norm(wr) <= np.linalg.norm(w1)


def test_meta_test_single_shot_is_finite():
    h = _features()
    w = meta_test_adapt(h, [1.3], [0.7], RegularizerSpec())
    assert np.all(np.isfinite(w))


def test_meta_test_empty_support_raises():
    with pytest.raises(ValueError):
        meta_test_adapt(_features(), [], [], RegularizerSpec())


def test_batched_adaptation_matches_one_at_a_time():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(6, 5, 10))
    y = rng.normal(size=(6, 5))
    batch = meta_test_adapt_batch(z, y, 0.5)
    for i in range(6):
        one = meta_test_adapt_batch(z[i:i + 1], y[i:i + 1], 0.5)
        assert np.array_equal(one.w[0], batch.w[i])
        assert one.steps[0] == batch.steps[i]


def test_meta_test_converges_to_ridge():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(1, 5, 8))
    y = rng.normal(size=(1, 5))
    res = meta_test_adapt_batch(z, y, 1.0)
    assert res.steps[0] < 5000
    np.testing.assert_allclose(res.w[0], ridge_solution(z[0], y[0], 1.0), atol=1e-3)
