"""Amortized sparse versions of ACRCD and ACRCD*.

For objectives f(x) = sum_r phi_r(a_r^T x) + <c, x> with sparse A the coupled
iterates are never materialized. Writing D_k = y_k - z_k, the coupling gives

    x_{k+1} = z_k + (1 - tau_k) D_k,
    D_{k+1} = (1 - tau_k) D_k + (c_z - c_y) e_i,   z_{k+1} = z_k - c_z e_i,

where c_y = g / L_i and c_z = alpha g / (p_i w_i) are the gradient and mirror
step lengths on the drawn coordinate i. We keep u = z and D = s_k v with a
scalar s_k known in closed form, plus the products A u and A v, so one
iteration costs O(nnz of column i) plus the draw.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import io as spio
from scipy import sparse

from .core import ContractError, CoordProblem, DivergenceError
from .sampler import CoordinateStream


class SparseMatrix:
    """Sparse matrix with both row (CSR) and column (CSC) access."""

    def __init__(self, matrix):
        M = sparse.csr_array(matrix, dtype=float)
        M.sum_duplicates()
        M.eliminate_zeros()
        self.csr = M
        self.csc = sparse.csc_array(M)
        self.m, self.n = M.shape

    @classmethod
    def from_triplets(cls, rows, cols, vals, shape):
        return cls(sparse.coo_array((vals, (rows, cols)), shape=shape))

    @classmethod
    def random(cls, m, n, density, seed=0, low=-1.0, high=1.0):
        rng = np.random.default_rng(seed)
        M = sparse.random_array((m, n), density=density, rng=rng,
                                data_sampler=lambda size: rng.uniform(low, high, size))
        return cls(M)

    @property
    def nnz(self):
        return int(self.csr.nnz)

    def col(self, j):
        p0, p1 = self.csc.indptr[j], self.csc.indptr[j + 1]
        return self.csc.indices[p0:p1], self.csc.data[p0:p1]

    def row(self, r):
        p0, p1 = self.csr.indptr[r], self.csr.indptr[r + 1]
        return self.csr.indices[p0:p1], self.csr.data[p0:p1]

    def matvec(self, x):
        return self.csr @ x

    def rmatvec(self, y):
        return self.csr.T @ y

    def toarray(self):
        return self.csr.toarray()

    def check(self):
        """Row and column views agree and count the same nonzeros."""
        rows_total = int(np.diff(self.csr.indptr).sum())
        cols_total = int(np.diff(self.csc.indptr).sum())
        if rows_total != cols_total or (self.csr != self.csc.tocsr()).nnz:
            raise AssertionError("row and column views disagree")
        return True

    # -- I/O

    def write_mm(self, path):
        spio.mmwrite(str(path), sparse.coo_matrix(self.csr), field="real", symmetry="general")

    @classmethod
    def read_mm(cls, path):
        return cls(spio.mmread(str(path)))

    _HEADER = struct.Struct("<qqq")
    _ENTRY = np.dtype([("row", "<i8"), ("col", "<i8"), ("val", "<f8")])

    def to_bytes(self):
        """Little-endian dump: int64 m, n, nnz, then nnz (int64 row, int64 col, float64 val)."""
        coo = self.csr.tocoo()
        rec = np.empty(self.nnz, dtype=self._ENTRY)
        rec["row"], rec["col"], rec["val"] = coo.row, coo.col, coo.data
        return self._HEADER.pack(self.m, self.n, self.nnz) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data):
        m, n, nnz = cls._HEADER.unpack_from(data, 0)
        rec = np.frombuffer(data, dtype=cls._ENTRY, count=nnz, offset=cls._HEADER.size)
        return cls.from_triplets(rec["row"], rec["col"], rec["val"], (m, n))


# --------------------------------------------------------------------------
# separable objectives


class LeastSquares:
    """phi_r(t) = 1/2 (t - b_r)^2."""

    def __init__(self, b):
        self.b = np.asarray(b, dtype=float)
        self.curvature = np.ones_like(self.b)

    def value(self, t):
        return 0.5 * np.sum((t - self.b) ** 2)

    def deriv(self, t, rows):
        return t - self.b[rows]


class Logistic:
    """phi_r(t) = ln(1 + exp(-s_r t)) with labels s_r in {-1, +1}."""

    def __init__(self, labels):
        self.s = np.asarray(labels, dtype=float)
        self.curvature = np.full_like(self.s, 0.25)

    def value(self, t):
        return float(np.sum(np.logaddexp(0.0, -self.s * t)))

    def deriv(self, t, rows):
        s = self.s[rows]
        return -s / (1.0 + np.exp(s * t))


class Exponential:
    """phi_r(t) = exp(t - 1); curvature is unbounded, ``curvature`` is a local guess."""

    def __init__(self, m):
        self.curvature = np.ones(m)

    def value(self, t):
        return float(np.sum(np.exp(t - 1.0)))

    def deriv(self, t, rows):
        return np.exp(t - 1.0)


class SeparableObjective(CoordProblem):
    """f(x) = sum_r phi_r(a_r^T x) + <c, x> over a :class:`SparseMatrix`.

    L_j defaults to sum_{r in col j} curvature_r A_rj^2.
    """

    def __init__(self, matrix, phi, linear=None, lipschitz=None):
        self.matrix = matrix
        self.phi = phi
        self.n = matrix.n
        self.m = matrix.m
        self.c = np.zeros(self.n) if linear is None else np.asarray(linear, dtype=float)
        if lipschitz is None:
            sq = matrix.csc.copy()
            sq.data = sq.data ** 2
            lipschitz = sq.T @ phi.curvature
        self.lipschitz = np.asarray(lipschitz, dtype=float)
        if np.any(self.lipschitz <= 0):
            # empty columns: f does not depend on x_j beyond the linear term
            self.lipschitz = np.where(self.lipschitz > 0, self.lipschitz, 1.0)
        self.minimizer_hint = None
        self.fstar_hint = None

    def value(self, x):
        return float(self.phi.value(self.matrix.matvec(x)) + self.c @ x)

    def partial(self, j, x):
        rows, vals = self.matrix.col(j)
        csr = self.matrix.csr
        indptr, indices, data = csr.indptr, csr.indices, csr.data
        t = np.empty(rows.size)
        for q, r in enumerate(rows):
            p0, p1 = indptr[r], indptr[r + 1]
            t[q] = data[p0:p1] @ x[indices[p0:p1]]
        return float(self.phi.deriv(t, rows) @ vals + self.c[j])

    def partial_from_products(self, j, t_rows, rows, vals):
        return float(self.phi.deriv(t_rows, rows) @ vals + self.c[j])

    def full_gradient(self, x):
        t = self.matrix.matvec(x)
        return self.matrix.rmatvec(self.phi.deriv(t, slice(None))) + self.c


def least_squares_instance(m, n, density, seed=0):
    """1/2 ||A x - b||^2 with a random sparse A; b = A x_hat + noise."""
    A = SparseMatrix.random(m, n, density, seed=seed)
    rng = np.random.default_rng(seed + 1)
    b = A.matvec(rng.uniform(-1, 1, n)) + 0.1 * rng.standard_normal(m)
    return SeparableObjective(A, LeastSquares(b))


# --------------------------------------------------------------------------
# lazy engines


@dataclass
class EngineStats:
    iterations: int = 0
    touches: int = 0
    draw_visits: int = 0
    rebases: int = 0
    rebase_touches: int = 0

    @property
    def touches_per_iteration(self):
        work = self.touches + self.rebase_touches + self.draw_visits
        return work / max(self.iterations, 1)


@dataclass
class LazyState:
    u: np.ndarray
    v: np.ndarray
    Au: np.ndarray
    Av: np.ndarray
    base: int = 0
    k: int = 0
    log_i: list = field(default_factory=list)
    log_g: list = field(default_factory=list)
    rebases: int = 0
    stats: EngineStats = field(default_factory=EngineStats)
    y: np.ndarray = None


def _init_state(objective, x0):
    x0 = np.asarray(x0, dtype=float)
    u = x0.copy()
    v = np.zeros_like(u)
    return LazyState(u=u, v=v, Au=objective.matrix.matvec(u), Av=np.zeros(objective.m))


def _step_factors(norm, tree):
    leaves = tree.leaf_weights
    with np.errstate(divide="ignore"):
        inv_L = 1.0 / np.asarray(norm.lipschitz, dtype=float)
        mirror = np.where(leaves > 0, tree.total / (leaves * norm.weights), 0.0)
    return inv_L, mirror


def _lazy_step(objective, st, j, s_x, inv_s_d, a, inv_L, mirror):
    """Gradient at x = u + s_x v on coordinate j, then update u, v, Au, Av.

    ``inv_s_d`` multiplies the increment of D to get the increment of v.
    Returns (g, c_y).
    """
    rows, vals = objective.matrix.col(j)
    t = st.Au[rows] + s_x * st.Av[rows]
    g = objective.partial_from_products(j, t, rows, vals)
    if not math.isfinite(g):
        raise DivergenceError(f"non-finite partial at iteration {st.k + 1}", k=st.k + 1)
    c_y = g * inv_L[j]
    c_z = a * g * mirror[j]
    dv = (c_z - c_y) * inv_s_d
    st.u[j] -= c_z
    st.v[j] += dv
    st.Au[rows] -= c_z * vals
    st.Av[rows] += dv * vals
    st.stats.touches += rows.size
    return g, c_y


def _rescale(st, factor, objective):
    st.v *= factor
    st.Av *= factor
    st.rebases += 1
    st.stats.rebases += 1
    st.stats.rebase_touches += objective.n + objective.m


def rebase_period(tau):
    """Iterations until (1 - tau)^-k passes 2^64."""
    if tau >= 1.0:
        return 1
    return max(1, math.ceil(64.0 / -math.log2(1.0 - tau)))


def acrcd_prime_run(objective, norm, tree, x0, alpha, tau, K, rng, *, stats=None,
                    callback=None, state_out=None):
    """Lazy ACRCD epoch; returns x_bar_K = mean(x_1..x_K).

    Matches :func:`acrcd.coupling.acrcd_epoch` under the same generator.
    ``callback(k, materialize)`` gets a zero-argument function returning x_k.
    """
    if not (0 < tau < 1) or alpha <= 0 or K < 1:
        raise ContractError("need tau in (0, 1), alpha > 0, K >= 1")
    st = _init_state(objective, x0)
    if stats is not None:
        st.stats = stats
    inv_L, mirror = _step_factors(norm, tree)
    stream = CoordinateStream(tree, rng)
    q = 1.0 - tau
    R = rebase_period(tau)
    for k in range(K):
        # x_{k+1} = u + q^{k+1-base} v
        e = k + 1 - st.base
        s_x = q ** e
        if callback is not None:
            callback(k + 1, lambda s_x=s_x: st.u + s_x * st.v)
        j = stream.next()
        g, _ = _lazy_step(objective, st, j, s_x, q ** -e, alpha, inv_L, mirror)
        st.log_i.append(j)
        st.log_g.append(g)
        st.k = k + 1
        st.stats.iterations += 1
        st.stats.draw_visits += tree.depth
        if e >= R:
            _rescale(st, q ** e, objective)
            st.base = k + 1
    xbar = assemble_average(st.log_i, st.log_g, alpha, tau, K, x0, inv_L, mirror)
    if state_out is not None:
        state_out.append(st)
    return xbar


def assemble_average(log_i, log_g, alpha, tau, K, x0, inv_L, mirror):
    """Closed form of (1/K) sum_{k=1..K} x_k from the logged (i_k, g_k).

    The gradient taken at x_j moves x_{j+1}, ..., x_K; summing the geometric
    factors gives the coefficient
        (c_z - c_y) (1 - tau)/tau (1 - (1 - tau)^(K - j)) - c_z (K - j).
    """
    if len(log_i) != K or len(log_g) != K:
        raise ContractError(f"contribution log has {len(log_i)} entries, expected {K}")
    x0 = np.asarray(x0, dtype=float)
    i = np.asarray(log_i, dtype=np.int64)
    g = np.asarray(log_g, dtype=float)
    c_y = g * inv_L[i]
    c_z = alpha * g * mirror[i]
    rem = K - np.arange(1, K + 1, dtype=float)
    q = 1.0 - tau
    geo = q / tau * -np.expm1(rem * math.log(q))
    coef = (c_z - c_y) * geo - c_z * rem
    out = x0 * K
    np.add.at(out, i, coef)
    return out / K


def _pi(k):
    """prod_{j=1..k} (1 - 2/(j + 2)) = 2 / ((k + 1)(k + 2))."""
    return 2.0 / ((k + 1.0) * (k + 2.0))


def _with(x, j, value):
    x[j] = value
    return x


def acrcd_star_prime_run(objective, norm, tree, x0, N, schedule=None, rng=None, *,
                         stats=None, callback=None, y_callback=None, rebase_ratio=2.0 ** 40):
    """Lazy ACRCD* with the simple schedule; returns (y_N, state).

    x_{k+1} = u + (P(k)/P(base)) v with P(k) = 2/((k+1)(k+2)).
    ``callback(k, materialize)`` sees x_k before step k; ``y_callback(k, materialize)``
    sees y_k right after it.
    """
    from .coupling import Schedule

    if schedule is None:
        schedule = Schedule.simple(tree.total)
    if schedule.kind != "simple":
        raise ContractError("the lazy ACRCD* engine needs the simple schedule")
    if N < 1:
        raise ContractError("N must be >= 1")
    n2 = schedule.n_eff ** 2
    st = _init_state(objective, x0)
    if stats is not None:
        st.stats = stats
    inv_L, mirror = _step_factors(norm, tree)
    stream = CoordinateStream(tree, rng)
    x_N = None
    for k in range(N):
        a = (k + 2.0) / (2.0 * n2)
        pb = _pi(st.base)
        s_x = _pi(k) / pb
        if callback is not None:
            callback(k + 1, lambda s_x=s_x: st.u + s_x * st.v)
        if k == N - 1:
            x_N = st.u + s_x * st.v
        j = stream.next()
        x_j = st.u[j] + s_x * st.v[j]
        g, c_y = _lazy_step(objective, st, j, s_x, pb / _pi(k), a, inv_L, mirror)
        if y_callback is not None:
            y_callback(k + 1, lambda s_x=s_x, j=j, y_j=x_j - c_y: _with(st.u + s_x * st.v, j, y_j))
        st.k = k + 1
        st.stats.iterations += 1
        st.stats.draw_visits += tree.depth
        if pb / _pi(k + 1) > rebase_ratio:
            _rescale(st, _pi(k) / pb, objective)
            st.base = k
    # y_N = Grad_{i_N}(x_N)
    y = x_N
    y[j] -= c_y
    st.y = y
    return y, st
