import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slemlab.online import (
    OnlineConfig,
    convex_run,
    convex_targets,
    ftml_run,
    regret,
    strong_convexity,
    regret_bound,
)


def _bound(trace, cfg):
    return regret_bound(float(np.max(trace.gradient_norms)), strong_convexity(cfg), trace.T)


def test_leader_is_running_mean():
    cfg = OnlineConfig(T=50, alpha=2.0, seed=1)
    trace = convex_run(cfg)
    c = convex_targets(cfg)
    for t in range(1, 50):
        assert abs(trace.iterates[t] - c[:t].mean() / 2.0) < 1e-12
    assert trace.iterates[0] == cfg.h_init


def test_regret_matches_closed_form_cumulative():
    cfg = OnlineConfig(T=200, seed=3)
    c = convex_targets(cfg)
    h = np.concatenate([[0.0], np.cumsum(c)[:-1] / np.arange(1, 200)])
    paid = np.sum((h - c) ** 2)
    best = np.sum((c - c.mean()) ** 2)
    assert abs(regret(convex_run(cfg)).total - (paid - best)) < 1e-10


def test_single_round_started_at_target_has_zero_regret():
    c = convex_targets(OnlineConfig(T=1))
    trace = convex_run(OnlineConfig(T=1, h_init=float(c[0])))
    assert regret(trace).total == 0.0


@pytest.mark.parametrize("T", [10, 100, 1000])
def test_regret_within_logarithmic_bound(T):
    cfg = OnlineConfig(T=T)
    trace = convex_run(cfg)
    assert regret(trace).total <= _bound(trace, cfg)


def test_average_regret_vanishes():
    trace = convex_run(OnlineConfig(T=1000))
    avg = regret(trace).average
    assert avg[999] < 0.1 * avg[9]


def test_average_regret_non_increasing_after_burn_in_seed0():
    avg = regret(convex_run(OnlineConfig(T=1000, seed=0))).average
    assert np.all(np.diff(avg[5:]) <= 1e-12)


def test_scaling_targets_scales_regret_quadratically():
    cfg = OnlineConfig(T=100, seed=2)
    c = convex_targets(cfg)
    base = regret(convex_run(cfg, c)).total
    assert regret(convex_run(cfg, 3.0 * c)).total == pytest.approx(9.0 * base, rel=1e-10)


def test_identical_losses_regret_is_first_round_only():
    cfg = OnlineConfig(T=20)
    trace = convex_run(cfg, np.full(20, 0.4))
    assert regret(trace).total == pytest.approx(0.16, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 300), st.floats(0.2, 3.0))
def test_regret_non_negative_and_bounded(seed, T, alpha):
    cfg = OnlineConfig(T=T, seed=seed, alpha=alpha)
    trace = convex_run(cfg)
    r = regret(trace).total
    assert r >= -1e-12
    assert r <= _bound(trace, cfg) + 1e-12


def test_csv_columns_and_values():
    trace = convex_run(OnlineConfig(T=5))
    rows = list(csv.DictReader(io.StringIO(trace.to_csv())))
    assert list(rows[0]) == ["t", "loss_incurred", "ftl_objective_value", "running_regret"]
    assert [int(r["t"]) for r in rows] == [1, 2, 3, 4, 5]
    assert float(rows[-1]["running_regret"]) == regret(trace).total


def test_config_validation():
    with pytest.raises(ValueError):
        OnlineConfig(T=0)
    with pytest.raises(ValueError):
        OnlineConfig(alpha=0.0)
    with pytest.raises(ValueError):
        OnlineConfig(instantiation="lstm")
    with pytest.raises(ValueError):
        OnlineConfig(instantiation="mlp", T=20_000)


def test_runs_are_bit_identical():
    a = convex_run(OnlineConfig(T=100, seed=7)).to_csv()
    b = convex_run(OnlineConfig(T=100, seed=7)).to_csv()
    assert a == b


def test_mlp_instance_smoke():
    cfg = OnlineConfig(T=3, instantiation="mlp", sizes=(1, 8, 8), ftl_max_epochs=20)
    trace = ftml_run(cfg)
    assert trace.approximate_comparator and regret(trace).approximate_comparator
    assert trace.T == 3
    assert np.all(np.isfinite(trace.running_regret))
    assert np.all(trace.ftl_objective >= 0)
