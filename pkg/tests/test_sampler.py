import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acrcd.core import ContractError
from acrcd.problems import make_example2
from acrcd.sampler import CoordinateStream, SamplingTree, linear_scan_draw


def test_build_examples():
    assert np.allclose(SamplingTree([1, 1, 1, 1]).probabilities(), 0.25)
    assert np.allclose(SamplingTree([1, 3]).probabilities(), [0.25, 0.75])
    t = SamplingTree.from_lipschitz([1, 4, 9], 0.5)
    assert np.allclose(t.leaf_weights, [1, 2, 3])
    assert np.allclose(t.probabilities(), [1 / 6, 2 / 6, 3 / 6])
    assert t.total == pytest.approx(6.0)


@pytest.mark.parametrize("bad", [[0, 0], [1, -1], [1, np.inf], []])
def test_build_rejects(bad):
    with pytest.raises(ContractError):
        SamplingTree(bad)


def test_draw_boundaries():
    t = SamplingTree([1, 3])
    assert t.draw(0.1) == 0
    assert t.draw(0.9) == 0
    assert t.draw(1.0) == 1      # ties go right
    assert t.draw(3.9) == 1
    for u in (-0.1, 4.0):
        with pytest.raises(ContractError):
            t.draw(u)


def test_zero_weight_unreachable():
    t = SamplingTree([2, 0, 2])
    us = np.linspace(0, 4, 4001)[:-1]
    assert 1 not in {t.draw(u) for u in us}
    assert 1 not in set(t.draw_many(us).tolist())


def test_draw_visits_logarithmic():
    for n in (1, 2, 5, 64, 100):
        t = SamplingTree(np.ones(n))
        t.visits = 0
        t.draw(0.5 * t.total)
        assert t.visits <= int(np.ceil(np.log2(n))) + 1


def test_frequencies_sqrt_weights():
    t = SamplingTree.from_lipschitz([1, 4, 9], 0.5)
    rng = np.random.default_rng(0)
    N = 10 ** 6
    idx = t.draw_many(rng.random(N) * t.total)
    counts = np.bincount(idx, minlength=3)
    p = np.array([1, 2, 3]) / 6
    assert np.all(np.abs(counts - N * p) <= 4 * np.sqrt(N * p * (1 - p)))


def test_update_weight_examples():
    t = SamplingTree([1, 1])
    before = t.nodes.copy()
    t.update_weight(0, 1.0)
    assert np.array_equal(t.nodes, before)
    t.update_weight(0, 3.0)
    assert np.allclose(t.probabilities(), [0.75, 0.25])
    with pytest.raises(ContractError):
        SamplingTree([1, 0]).update_weight(0, 0.0)
    with pytest.raises(ContractError):
        t.update_weight(1, -2.0)


def test_random_updates_match_rebuild():
    rng = np.random.default_rng(5)
    w = rng.random(37)
    t = SamplingTree(w)
    for _ in range(1000):
        i = int(rng.integers(37))
        w[i] = rng.random() * 10
        t.update_weight(i, w[i])
    fresh = SamplingTree(w)
    assert np.allclose(t.prefix_sums(), fresh.prefix_sums(), rtol=1e-9, atol=1e-9)
    assert t.check()


@settings(max_examples=60)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=64), st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_tree_equals_linear_scan(weights, fractions):
    if sum(weights) <= 0:
        weights = weights + [1.0]
    t = SamplingTree(weights)
    for f in fractions:
        u = min(f * t.total, np.nextafter(t.total, 0))
        i = t.draw(u)
        pre = t.prefix_sums()
        slack = 1e-12 * t.total
        assert pre[i] - slack <= u < pre[i + 1] + slack
        assert weights[i] > 0


def test_tree_linear_scan_exact_on_integer_weights():
    rng = np.random.default_rng(3)
    w = rng.integers(0, 5, 16).astype(float)
    w[0] = 1.0
    t = SamplingTree(w)
    us = rng.random(10 ** 4) * t.total
    assert all(t.draw(u) == linear_scan_draw(w, u) for u in us)


def test_unbiased_scaled_estimator():
    p = make_example2(9, seed=2)
    t = SamplingTree.from_lipschitz(p.lipschitz, 1.0)
    x = np.random.default_rng(0).standard_normal(9)
    probs = t.probabilities()
    est = sum(probs[i] * (p.partial(i, x) / probs[i]) * np.eye(9)[i] for i in range(9))
    assert np.allclose(est, p.full_gradient(x), rtol=1e-12, atol=1e-12)


def test_stream_independent_of_block_size():
    t = SamplingTree([1.0, 2.0, 0.5, 4.0])
    a = CoordinateStream(t, np.random.default_rng(9), block=7)
    b = CoordinateStream(t, np.random.default_rng(9), block=4096)
    c = CoordinateStream(t, np.random.default_rng(9), dynamic=True)
    seqs = [[s.next() for _ in range(500)] for s in (a, b, c)]
    assert seqs[0] == seqs[1] == seqs[2]
