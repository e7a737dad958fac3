"""Variance-reduced gradient method for finite sums f = (1/m) sum_k f_k.

Inner steps use the snapshot estimator grad f_xi(x) - grad f_xi(y) + grad f(y)
with a plain gradient step; each epoch recomputes the full gradient at the new
snapshot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import ContractError, DivergenceError


class FiniteSumProblem:
    """Interface: m components on R^n with ``component_grad(k, x)``."""

    m: int
    n: int
    L: float
    mu: float
    x_star = None
    f_star = None

    def component_value(self, k, x):
        raise NotImplementedError

    def component_grad(self, k, x):
        raise NotImplementedError

    def value(self, x):
        return sum(self.component_value(k, x) for k in range(self.m)) / self.m

    def gradient(self, x):
        g = np.zeros(self.n)
        for k in range(self.m):
            g += self.component_grad(k, x)
        return g / self.m

    def gap(self, x):
        return self.value(x) - self.f_star


class RidgeFiniteSum(FiniteSumProblem):
    """f_k(x) = 1/2 (a_k^T x - b_k)^2 + lam/2 ||x||^2."""

    def __init__(self, A, b, lam):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.lam = float(lam)
        self.m, self.n = self.A.shape
        self.L = float(np.max(np.sum(self.A ** 2, axis=1)) + self.lam)
        H = self.A.T @ self.A / self.m + self.lam * np.eye(self.n)
        self.hessian = H
        self.mu = float(linalg.eigvalsh(H)[0])
        self.x_star = linalg.solve(H, self.A.T @ self.b / self.m, assume_a="pos")
        self.f_star = self.value(self.x_star)

    def component_value(self, k, x):
        r = self.A[k] @ x - self.b[k]
        return 0.5 * r * r + 0.5 * self.lam * (x @ x)

    def component_grad(self, k, x):
        return (self.A[k] @ x - self.b[k]) * self.A[k] + self.lam * x

    def value(self, x):
        r = self.A @ x - self.b
        return float(0.5 * (r @ r) / self.m + 0.5 * self.lam * (x @ x))

    def gradient(self, x):
        return self.A.T @ (self.A @ x - self.b) / self.m + self.lam * x

    def gap(self, x):
        e = x - self.x_star
        return float(0.5 * e @ (self.hessian @ e))


def make_ridge_finite_sum(m=200, n=50, seed=0, lam=0.1):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n)) / math.sqrt(n)
    b = A @ rng.standard_normal(n) + 0.1 * rng.standard_normal(m)
    return RidgeFiniteSum(A, b, lam)


@dataclass
class EpochState:
    snapshot: np.ndarray
    snapshot_grad: np.ndarray
    x: np.ndarray
    epoch: int = 0
    evaluations: int = 0


def snapshot(problem, y, epoch=0, evaluations=0):
    """Epoch state at snapshot ``y``; the full gradient costs m evaluations."""
    y = np.array(y, dtype=float, copy=True)
    return EpochState(snapshot=y, snapshot_grad=problem.gradient(y), x=y.copy(),
                      epoch=epoch, evaluations=evaluations + problem.m)


def _estimate(problem, state, x, xi):
    return (problem.component_grad(xi, x) - problem.component_grad(xi, state.snapshot)
            + state.snapshot_grad)


def vr_estimator(problem, state, x, xi):
    """Snapshot estimator; adds its two component evaluations to ``state``."""
    if not 0 <= xi < problem.m:
        raise ContractError(f"component index {xi} outside [0, {problem.m})")
    state.evaluations += 2
    return _estimate(problem, state, x, xi)


def vr_epoch(problem, y_snapshot, N_inner, step_size, rng, batch=1, state=None):
    """One epoch; returns (x_N, state). Costs m + 2 * batch * N_inner evaluations."""
    if N_inner < 0 or step_size <= 0 or batch < 1:
        raise ContractError("need N_inner >= 0, step_size > 0, batch >= 1")
    st = snapshot(problem, y_snapshot, state.epoch + 1 if state else 0,
                  state.evaluations if state else 0)
    x = st.x
    for t in range(N_inner):
        xis = rng.integers(problem.m, size=batch)
        if batch == 1:
            g = vr_estimator(problem, st, x, int(xis[0]))
        else:
            g = sum(vr_estimator(problem, st, x, int(xi)) for xi in xis) / batch
        x = x - step_size * g
        if not np.isfinite(x).all():
            raise DivergenceError(f"non-finite inner iterate at step {t + 1}", k=t + 1)
    st.x = x
    return x, st


@dataclass
class VarianceReport:
    variance: float
    bound_reference: float

    @property
    def ratio(self):
        if self.bound_reference == 0.0:
            return 0.0 if self.variance == 0.0 else math.inf
        return self.variance / self.bound_reference


def variance_probe(problem, state, x, samples=None, rng=None):
    """Estimate E_xi ||estimator(x, xi) - grad f(x)||^2.

    ``samples=None`` enumerates all m components (exact). The reference is
    L (f(y^s) - f_*) + L (f(x) - f_*).
    """
    if getattr(problem, "constrained", False):
        raise ContractError("the variance bound is only stated for unconstrained problems")
    grad = problem.gradient(x)
    if samples is None:
        xis = range(problem.m)
    else:
        if samples < 1:
            raise ContractError("samples must be >= 1")
        xis = rng.integers(problem.m, size=samples)
    total = 0.0
    count = 0
    for xi in xis:
        d = _estimate(problem, state, x, int(xi)) - grad
        total += float(d @ d)
        count += 1
    ref = problem.L * (problem.gap(state.snapshot) + problem.gap(x))
    return VarianceReport(variance=total / count, bound_reference=ref)


@dataclass
class VRResult:
    x: np.ndarray
    epochs: int
    evaluations: int
    gap_estimates: list = field(default_factory=list)
    budget_exhausted: bool = False


def vr_driver(problem, x0, epsilon, rng, N_inner=None, step_size=None, batch=1,
              max_epochs=200, max_evaluations=None):
    """Epochs until the gap proxy ||grad f(y)||^2 / (2 mu) drops to epsilon.

    Defaults: N_inner = ceil(4 L / mu), step_size = 1 / (10 L).
    """
    if problem.mu <= 0:
        raise ContractError("the driver needs mu > 0")
    N_inner = math.ceil(4 * problem.L / problem.mu) if N_inner is None else N_inner
    step_size = 1.0 / (10.0 * problem.L) if step_size is None else step_size
    y = np.asarray(x0, dtype=float).copy()
    st = snapshot(problem, y, epoch=0)
    res = VRResult(x=y, epochs=0, evaluations=st.evaluations)
    proxy = float(st.snapshot_grad @ st.snapshot_grad) / (2 * problem.mu)
    res.gap_estimates.append(proxy)
    while proxy > epsilon and res.epochs < max_epochs:
        cost = problem.m + 2 * batch * N_inner
        if max_evaluations is not None and st.evaluations + cost > max_evaluations:
            res.budget_exhausted = True
            break
        x = st.x
        for _ in range(N_inner):
            xis = rng.integers(problem.m, size=batch)
            g = sum(vr_estimator(problem, st, x, int(xi)) for xi in xis) / batch
            x = x - step_size * g
        if not np.isfinite(x).all():
            raise DivergenceError(f"non-finite iterate in epoch {res.epochs + 1}")
        res.epochs += 1
        st = snapshot(problem, x, epoch=res.epochs, evaluations=st.evaluations)
        proxy = float(st.snapshot_grad @ st.snapshot_grad) / (2 * problem.mu)
        res.gap_estimates.append(proxy)
    res.x = st.x
    res.evaluations = st.evaluations
    if proxy > epsilon and not res.budget_exhausted:
        res.budget_exhausted = True
    return res
