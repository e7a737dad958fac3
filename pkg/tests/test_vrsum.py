import math

import numpy as np
import pytest

from acrcd.core import ContractError
from acrcd.vrsum import (RidgeFiniteSum, make_ridge_finite_sum, snapshot, variance_probe,
                         vr_driver, vr_epoch, vr_estimator)


def small(m=5, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return RidgeFiniteSum(rng.standard_normal((m, n)), rng.standard_normal(m), 0.3)


def test_aggregate_gradient_is_mean():
    p = small()
    x = np.array([0.2, -1.0, 0.4])
    mean = sum(p.component_grad(k, x) for k in range(p.m)) / p.m
    assert np.allclose(p.gradient(x), mean, rtol=1e-12, atol=1e-14)
    st = snapshot(p, x)
    assert np.allclose(st.snapshot_grad, p.gradient(x), rtol=1e-12, atol=1e-14)


def test_estimator_cases():
    p = small()
    y = np.array([1.0, 2.0, 3.0])
    st = snapshot(p, y)
    for k in range(p.m):
        assert np.allclose(vr_estimator(p, st, y, k), st.snapshot_grad)
    x = np.array([-0.5, 0.1, 0.0])
    mean = sum(vr_estimator(p, st, x, k) for k in range(p.m)) / p.m
    assert np.allclose(mean, p.gradient(x), rtol=1e-12, atol=1e-13)
    assert st.evaluations == p.m + 2 * 2 * p.m
    with pytest.raises(ContractError):
        vr_estimator(p, st, x, p.m)
    one = small(m=1)
    st1 = snapshot(one, y)
    assert np.allclose(vr_estimator(one, st1, x, 0), one.gradient(x))


def test_epoch_boundaries():
    p = small()
    y = np.ones(3)
    x, st = vr_epoch(p, y, 0, 0.1, np.random.default_rng(0))
    assert np.array_equal(x, y) and st.evaluations == p.m
    # m = 1, f = 1/2 x^2: step 1 lands on the optimum
    half = RidgeFiniteSum(np.zeros((1, 1)), np.zeros(1), 1.0)
    x, _ = vr_epoch(half, np.array([3.0]), 1, 1.0, np.random.default_rng(0))
    assert x.tolist() == [0.0]
    with pytest.raises(ContractError):
        vr_epoch(p, y, 1, 0.0, np.random.default_rng(0))


def test_probe_exhaustive_matches_enumeration():
    p = small(m=2, n=2, seed=1)
    st = snapshot(p, np.array([1.0, -1.0]))
    x = np.array([0.3, 0.4])
    g = p.gradient(x)
    exact = np.mean([np.sum((vr_estimator(p, st, x, k) - g) ** 2) for k in range(2)])
    assert variance_probe(p, st, x).variance == pytest.approx(exact, rel=1e-12)
    mc = variance_probe(p, st, x, samples=4000, rng=np.random.default_rng(0)).variance
    assert mc == pytest.approx(exact, rel=0.1)


def test_probe_zero_at_optimum():
    p = make_ridge_finite_sum(30, 5, seed=2)
    st = snapshot(p, p.x_star)
    rep = variance_probe(p, st, p.x_star)
    assert rep.variance < 1e-25
    assert rep.ratio <= 8 or rep.bound_reference == 0


def test_epoch_cost_accounting_with_batches():
    p = make_ridge_finite_sum(40, 6, seed=0)
    _, st = vr_epoch(p, np.zeros(6), 17, 0.01, np.random.default_rng(1), batch=3)
    assert st.evaluations == 40 + 2 * 3 * 17


def test_driver_zero_epochs_at_optimum():
    p = make_ridge_finite_sum(30, 5, seed=0)
    res = vr_driver(p, p.x_star, 1e-8, np.random.default_rng(0))
    assert res.epochs == 0 and not res.budget_exhausted


def test_driver_budget_flag():
    p = make_ridge_finite_sum(50, 10, seed=0)
    res = vr_driver(p, np.zeros(10), 1e-12, np.random.default_rng(0), max_evaluations=500)
    assert res.budget_exhausted


def test_driver_evaluation_pattern():
    p = make_ridge_finite_sum(200, 50, seed=0, lam=0.01)
    kappa = p.L / p.mu
    assert 50 <= kappa <= 200
    eps = 1e-6
    res = vr_driver(p, np.zeros(50), eps, np.random.default_rng(0))
    d0 = res.gap_estimates[0]
    c = 8.0
    assert res.gap_estimates[-1] <= eps
    assert res.evaluations <= 5 * (p.m + c * kappa) * math.log2(d0 / eps)


def test_batching_halves_inner_loop():
    p = make_ridge_finite_sum(200, 50, seed=0)
    N = math.ceil(4 * p.L / p.mu)
    r = math.ceil(2 * math.sqrt(p.L / p.mu))
    ratios = {1: [], r: []}
    for seed in range(20):
        for batch, inner in ((1, N), (r, math.ceil(N / 2))):
            rng = np.random.default_rng(seed)
            y = np.zeros(50)
            x, _ = vr_epoch(p, y, inner, 1 / (10 * p.L), rng, batch=batch)
            ratios[batch].append(p.gap(x) / p.gap(y))
    assert np.median(ratios[r]) <= 0.9
    assert np.median(ratios[1]) <= 0.9
