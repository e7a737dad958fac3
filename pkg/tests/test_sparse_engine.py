import math

import numpy as np
import pytest

from acrcd.core import ContractError, WeightedNorm
from acrcd.coupling import Schedule, acrcd_epoch, acrcd_star, epoch_parameters
from acrcd.sampler import SamplingTree
from acrcd.sparse_engine import (EngineStats, Exponential, LeastSquares, Logistic,
                                 SeparableObjective, SparseMatrix, acrcd_prime_run,
                                 acrcd_star_prime_run, assemble_average, least_squares_instance,
                                 rebase_period, _pi)


def setup(obj, beta=0.0):
    return WeightedNorm(obj.lipschitz, beta), SamplingTree.from_lipschitz(obj.lipschitz, beta)


def test_matrix_views_agree():
    A = SparseMatrix.random(20, 30, 0.2, seed=1)
    assert A.check()
    dense = A.toarray()
    assert A.nnz == np.count_nonzero(dense)
    assert sum(A.col(j)[0].size for j in range(30)) == sum(A.row(r)[0].size for r in range(20))
    assert np.array_equal(SparseMatrix(dense.T).toarray(), dense.T)


def test_matrix_market_and_binary_round_trip(tmp_path):
    A = SparseMatrix.random(7, 9, 0.3, seed=2)
    A.write_mm(tmp_path / "a.mtx")
    assert np.array_equal(SparseMatrix.read_mm(tmp_path / "a.mtx").toarray(), A.toarray())
    text = (tmp_path / "a.mtx").read_text().splitlines()
    assert text[0].startswith("%%MatrixMarket matrix coordinate real")
    blob = A.to_bytes()
    assert len(blob) == 24 + 24 * A.nnz
    assert np.array_equal(SparseMatrix.from_bytes(blob).toarray(), A.toarray())


@pytest.mark.parametrize("phi_kind", ["ls", "logistic", "exp"])
def test_separable_partials_match_dense(phi_kind):
    rng = np.random.default_rng(0)
    A = SparseMatrix.random(15, 10, 0.3, seed=3)
    phi = {"ls": LeastSquares(rng.standard_normal(15)),
           "logistic": Logistic(np.sign(rng.standard_normal(15))),
           "exp": Exponential(15)}[phi_kind]
    obj = SeparableObjective(A, phi)
    x = 0.3 * rng.standard_normal(10)
    g = obj.full_gradient(x)
    for j in range(10):
        assert obj.partial(j, x) == pytest.approx(g[j], rel=1e-12, abs=1e-13)
    from acrcd.core import fd_check
    assert fd_check(obj, x) <= 1e-6


def test_one_by_one_matches_dense():
    obj = SeparableObjective(SparseMatrix(np.array([[2.0]])), LeastSquares(np.array([4.0])))
    norm, tree = setup(obj)
    a, t, K = 0.3, 1 / (0.3 + 1), 25
    dense = acrcd_epoch(obj, norm, tree, np.zeros(1), a, t, K, np.random.default_rng(0))
    lazy = acrcd_prime_run(obj, norm, tree, np.zeros(1), a, t, K, np.random.default_rng(0))
    assert lazy == pytest.approx(dense, rel=1e-12)


def test_lazy_epoch_matches_dense_with_rebases():
    obj = least_squares_instance(20, 30, 0.2, seed=0)
    norm, tree = setup(obj)
    x0 = np.zeros(30)
    alpha, tau, _ = epoch_parameters(tree.total, 5.0, 1.0)
    K = 5000
    trace_dense, trace_lazy = [], []
    dense, _ = acrcd_epoch(obj, norm, tree, x0, alpha, tau, K, np.random.default_rng(4),
                           callback=lambda k, st: trace_dense.append(st.x.copy()),
                           return_state=True)
    states = []
    lazy = acrcd_prime_run(obj, norm, tree, x0, alpha, tau, K, np.random.default_rng(4),
                           callback=lambda k, mat: trace_lazy.append(mat()), state_out=states)
    assert states[0].rebases >= 1
    scale = max(np.max(np.abs(x)) for x in trace_dense)
    # callback order: dense sees x_k after the step's x update, lazy before the draw
    dev = max(np.max(np.abs(a - b)) for a, b in zip(trace_dense, trace_lazy))
    assert dev <= 1e-8 * scale
    assert np.max(np.abs(lazy - dense)) <= 1e-8 * np.max(np.abs(dense))
    st = states[0]
    A = obj.matrix
    assert np.allclose(st.Au, A.matvec(st.u), rtol=1e-9, atol=1e-9 * np.abs(st.Au).max())
    assert np.allclose(st.Av, A.matvec(st.v), rtol=1e-9, atol=1e-9 * np.abs(st.Av).max())


def test_touch_count_bound():
    obj = least_squares_instance(60, 120, 0.05, seed=2)
    norm, tree = setup(obj)
    alpha, tau, _ = epoch_parameters(tree.total, 5.0, 1.0)
    stats = EngineStats()
    K = 20000
    acrcd_prime_run(obj, norm, tree, np.zeros(120), alpha, tau, K, np.random.default_rng(0),
                    stats=stats)
    nnz_per_col = obj.matrix.nnz / obj.n
    assert stats.touches <= 1.2 * K * nnz_per_col + 10 * obj.n
    assert stats.touches_per_iteration <= 2 * nnz_per_col + math.ceil(math.log2(obj.n))


def test_assemble_average_small_cases():
    inv_L = np.array([0.5, 1.0])
    mirror = np.array([2.0, 3.0])
    x0 = np.array([1.0, -1.0])
    # K = 1: the mean is x_1 = x0, no gradient has moved it yet
    assert np.array_equal(assemble_average([1], [0.7], 0.2, 0.4, 1, x0, inv_L, mirror), x0)
    out = assemble_average([0, 1, 0], [0.0, 0.0, 0.0], 0.2, 0.4, 3, x0, inv_L, mirror)
    assert np.array_equal(out, x0)
    with pytest.raises(ContractError):
        assemble_average([0], [1.0], 0.2, 0.4, 2, x0, inv_L, mirror)


def test_assemble_average_two_steps_by_hand():
    inv_L = np.array([0.5])
    mirror = np.array([2.0])
    a, tau = 0.2, 0.4
    g1, g2 = 0.7, -0.3
    # x1 = x0; y1 = x0 - g1/2, z1 = x0 - a g1 2; x2 = tau z1 + (1 - tau) y1
    x0 = np.array([1.0])
    x2 = tau * (x0 - a * g1 * 2) + (1 - tau) * (x0 - g1 * 0.5)
    out = assemble_average([0, 0], [g1, g2], a, tau, 2, x0, inv_L, mirror)
    assert out == pytest.approx((x0 + x2) / 2, rel=1e-14)


def test_star_single_step_and_product_identity():
    obj = least_squares_instance(10, 12, 0.3, seed=5)
    norm, tree = setup(obj)
    y_d, _ = acrcd_star(obj, norm, tree, np.zeros(12), 1, rng=np.random.default_rng(3))
    y_l, _ = acrcd_star_prime_run(obj, norm, tree, np.zeros(12), 1, rng=np.random.default_rng(3))
    assert np.allclose(y_d, y_l, rtol=1e-14, atol=0)
    prod = 1.0
    worst = 0.0
    for k in range(1, 10 ** 6 + 1):
        prod *= 1.0 - 2.0 / (k + 2.0)
        if k % 1000 == 0 or k < 100:
            worst = max(worst, abs(prod - _pi(k)) / _pi(k))
    assert worst <= 1e-9  # iterative product drifts; the closed form is exact
    assert _pi(0) == 1.0


def test_star_lazy_matches_dense_long_run():
    obj = least_squares_instance(50, 200, 0.05, seed=1)
    norm, tree = setup(obj)
    N = 20000
    dense, lazy = {}, {}

    def cb_dense(k, st):
        if k % 500 == 0:
            dense[k] = st.x.copy()

    def cb_lazy(k, mat):
        if k % 500 == 0:
            lazy[k] = mat()

    y_d, _ = acrcd_star(obj, norm, tree, np.zeros(200), N, rng=np.random.default_rng(7),
                        callback=cb_dense)
    y_l, _ = acrcd_star_prime_run(obj, norm, tree, np.zeros(200), N,
                                  rng=np.random.default_rng(7), callback=cb_lazy)
    for k in dense:
        assert np.linalg.norm(dense[k] - lazy[k]) <= 1e-7 * np.linalg.norm(dense[k])
    assert np.linalg.norm(y_d - y_l) <= 1e-7 * np.linalg.norm(y_d)


def test_star_lazy_rejects_recurrence():
    obj = least_squares_instance(5, 6, 0.5, seed=0)
    norm, tree = setup(obj)
    with pytest.raises(ContractError):
        acrcd_star_prime_run(obj, norm, tree, np.zeros(6), 5, Schedule.recurrence(tree.total))


def test_rebase_period():
    assert rebase_period(0.5) == 64
    assert (1 - 0.01) ** -rebase_period(0.01) >= 2.0 ** 64
