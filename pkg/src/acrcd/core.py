"""Coordinate oracles, weighted norms and the two primitive steps.

Everything here works on unconstrained problems (the feasible set is all of
R^n) with a Euclidean prox function that is diagonal in the coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class OracleError(FloatingPointError):
    """A coordinate oracle returned a non-finite value."""

    def __init__(self, i, x, value=None):
        self.i = i
        self.x = np.array(x, copy=True)
        self.value = value
        super().__init__(f"non-finite partial derivative {value!r} at coordinate {i}")


class ContractError(ValueError):
    """Precondition of an operation was violated by the caller."""


class DivergenceError(FloatingPointError):
    """An iterate became non-finite; ``trace`` holds what was logged so far."""

    def __init__(self, message, trace=None, k=None):
        super().__init__(message)
        self.trace = list(trace or [])
        self.k = k


@dataclass
class TraceRecord:
    run_id: str
    epoch: int
    k: int
    coord_calls: int
    value_calls: int
    gap: float
    dist_sq: float
    elapsed_ns: int = 0


class CoordProblem:
    """Base class for objectives accessed through coordinate oracles.

    Subclasses set ``n`` and ``lipschitz`` (array of coordinate Lipschitz
    constants L_i) and implement :meth:`value` and :meth:`partial`.
    ``full_gradient`` is optional; the default stacks partials.
    """

    n: int
    lipschitz: np.ndarray
    minimizer_hint: Optional[np.ndarray] = None
    fstar_hint: Optional[float] = None

    def value(self, x):
        raise NotImplementedError

    def partial(self, i, x):
        raise NotImplementedError

    def lip(self, i):
        return float(self.lipschitz[i])

    def full_gradient(self, x):
        return np.array([self.partial(i, x) for i in range(self.n)])

    def gap(self, x):
        """f(x) - f_* when the optimum is known, else f(x)."""
        f = self.value(x)
        return f - self.fstar_hint if self.fstar_hint is not None else f


class FunctionProblem(CoordProblem):
    """Problem assembled from plain callables; handy for small tests."""

    def __init__(self, value, partial, lipschitz, gradient=None,
                 minimizer=None, fstar=None):
        self._value = value
        self._partial = partial
        self._gradient = gradient
        self.lipschitz = np.asarray(lipschitz, dtype=float)
        self.n = self.lipschitz.size
        self.minimizer_hint = None if minimizer is None else np.asarray(minimizer, float)
        self.fstar_hint = fstar
        if np.any(self.lipschitz <= 0):
            raise ContractError("coordinate Lipschitz constants must be positive")

    def value(self, x):
        return float(self._value(x))

    def partial(self, i, x):
        return float(self._partial(i, x))

    def full_gradient(self, x):
        if self._gradient is None:
            return super().full_gradient(x)
        return np.asarray(self._gradient(x), dtype=float)


class WeightedNorm:
    """||x||^2 = sum_i L_i^(1 - 2 beta) x_i^2 and its prox distance.

    ``beta = 0`` gives the norm sum_i L_i x_i^2; ``beta = 1/2`` the plain
    Euclidean norm.
    """

    def __init__(self, lipschitz, beta=0.0):
        if not 0.0 <= beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {beta}")
        self.beta = float(beta)
        self.lipschitz = np.array(lipschitz, dtype=float)
        self.weights = self._weights(self.lipschitz)

    def _weights(self, L):
        if self.beta == 0.0:
            return L.copy()
        if self.beta == 0.5:
            return np.ones_like(L)
        return L ** (1.0 - 2.0 * self.beta)

    def copy(self):
        return WeightedNorm(self.lipschitz, self.beta)

    def update(self, i, L_i):
        self.lipschitz[i] = L_i
        self.weights[i] = self._weights(np.array([L_i]))[0]

    def norm_sq(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.dot(self.weights, x * x))

    def dual_norm_sq(self, g):
        g = np.asarray(g, dtype=float)
        return float(np.dot(g * g, 1.0 / self.weights))

    def prox_distance(self, x, y):
        """V_x(y) = 1/2 ||y - x||^2."""
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return 0.5 * self.norm_sq(d)


def _checked_partial(problem, i, x):
    g = problem.partial(i, x)
    if not math.isfinite(g):
        raise OracleError(i, x, g)
    return g


def grad_step(problem, x, i, L=None):
    """Coordinate gradient step ``x - partial_i f(x) / L_i e_i`` (a new array)."""
    if not 0 <= i < problem.n:
        raise ContractError(f"coordinate {i} outside [0, {problem.n})")
    L = problem.lip(i) if L is None else L
    if L <= 0:
        raise ContractError("step Lipschitz constant must be positive")
    g = _checked_partial(problem, i, x)
    y = np.array(x, dtype=float, copy=True)
    y[i] -= g / L
    return y


def mirr_step(norm, z, xi):
    """Mirror step for a one-hot linear term ``xi`` under ``norm``.

    Minimizes <xi, y - z> + 1/2 ||y - z||^2, i.e. z_i - xi_i / weights[i].
    """
    xi = np.asarray(xi, dtype=float)
    nz = np.flatnonzero(xi)
    if nz.size > 1:
        raise ContractError(f"mirror input must be one-hot, got {nz.size} nonzeros")
    out = np.array(z, dtype=float, copy=True)
    if nz.size:
        i = nz[0]
        out[i] -= xi[i] / norm.weights[i]
    return out


def fd_check(problem, x, h=1e-5):
    """Max over i of |central difference - partial_i| / (1 + |partial_i|)."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    worst = 0.0
    e = np.zeros_like(x)
    for i in range(problem.n):
        e[i] = h
        fd = (problem.value(x + e) - problem.value(x - e)) / (2.0 * h)
        e[i] = 0.0
        g = problem.partial(i, x)
        worst = max(worst, abs(fd - g) / (1.0 + abs(g)))
    return worst


_MASK64 = (1 << 64) - 1


def splitmix64(state):
    """One round of the splitmix64 output function on a 64-bit integer."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class InexactOracle(CoordProblem):
    """Coordinate oracle with deterministic additive noise of size ``delta``.

    The k-th call to :meth:`partial` (for any coordinate i) returns
    ``inner.partial(i, x) + s * delta`` with ``s in {-1, +1}`` taken from the
    top bit of ``splitmix64(seed, i, k)``. The perturbation bound is therefore
    exactly ``delta`` (c = 1). In terms of the two-sided model inequality this
    is a delta-oracle with level ``delta**2 / (2 L_i)`` after doubling L_i.
    Values are passed through unchanged.
    """

    bound_constant = 1.0

    def __init__(self, inner, delta, seed=0):
        if delta < 0:
            raise ContractError("delta must be non-negative")
        self.inner = inner
        self.delta = float(delta)
        self.seed = int(seed) & _MASK64
        self.n = inner.n
        self.lipschitz = inner.lipschitz
        self.minimizer_hint = inner.minimizer_hint
        self.fstar_hint = inner.fstar_hint
        self.calls = 0

    def sign(self, i, k):
        h = splitmix64(self.seed ^ splitmix64((i << 32) ^ k))
        return 1.0 if h >> 63 else -1.0

    def value(self, x):
        return self.inner.value(x)

    def partial(self, i, x):
        g = self.inner.partial(i, x)
        k = self.calls
        self.calls += 1
        if self.delta == 0.0:
            return g
        return g + self.sign(i, k) * self.delta

    def full_gradient(self, x):
        return np.array([self.partial(i, x) for i in range(self.n)])


def wrap_inexact(problem, delta, seed=0):
    return InexactOracle(problem, delta, seed)
