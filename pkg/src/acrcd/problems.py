"""Test problems: quadratics, entropy-linear-programming duals, projection duals.

All generators are deterministic functions of their arguments (including the
seed) and return immutable instances.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import ContractError, CoordProblem


class NonSeparableSetError(ContractError):
    """Coordinate methods cannot handle feasible sets that couple coordinates.

    Counterexample: minimize (x1 - 2)^2 + (x2 - 1)^2 over
    {x >= 0, x1 + x2 <= 2} from x0 = (1, 1). Each coordinate direction through
    x0 is already optimal inside the set, so a method that optimizes along the
    drawn coordinate never moves, although f(0.5, 1.5) = 0.5 < 1 = f(x0).
    """


class OverflowWarningError(OverflowError):
    def __init__(self, magnitude):
        self.magnitude = magnitude
        super().__init__(f"exponent {magnitude:.3g} overflows double precision")


def restrict(problem, feasible_set):
    """Attach a feasible set to ``problem``.

    Only the whole space is supported. Sets described by constraints linking
    several coordinates (``{"kind": "linear", ...}``, simplices) are rejected
    with :class:`NonSeparableSetError`; boxes are separable but not
    implemented.
    """
    kind = feasible_set.get("kind") if isinstance(feasible_set, dict) else feasible_set
    if kind in (None, "full", "R^n"):
        return problem
    if kind in ("linear", "simplex", "polytope"):
        raise NonSeparableSetError(
            "feasible set couples coordinates; a coordinate method can stall at a"
            " non-optimal point (see NonSeparableSetError docstring)")
    if kind == "box":
        raise NotImplementedError("box constraints are separable but not supported; only Q = R^n")
    raise ContractError(f"unknown feasible set {kind!r}")


# --------------------------------------------------------------------------
# quadratics


class QuadraticProblem(CoordProblem):
    """f(x) = 1/2 <x, S x> - <b, x> with L_i = S_ii."""

    def __init__(self, S, b, metadata=None, solve=True):
        S = np.asarray(S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=0, rtol=1e-14):
            raise ContractError("S must be a symmetric square matrix")
        self.S = S
        self.b = np.asarray(b, dtype=float)
        self.n = S.shape[0]
        self.lipschitz = np.diag(S).copy()
        if np.any(self.lipschitz <= 0):
            raise ContractError("diagonal of S must be positive")
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("min_entry", float(S.min()))
        self.metadata.setdefault("max_entry", float(S.max()))
        if solve:
            self.minimizer_hint = linalg.solve(S, self.b, assume_a="sym")
            self.fstar_hint = float(-0.5 * self.b @ self.minimizer_hint)

    def value(self, x):
        return float(0.5 * x @ (self.S @ x) - self.b @ x)

    def partial(self, i, x):
        return float(self.S[i] @ x - self.b[i])

    def full_gradient(self, x):
        return self.S @ x - self.b

    def gap(self, x):
        # 1/2 e^T S e is accurate near the optimum where f - f_* cancels badly
        e = np.asarray(x, dtype=float) - self.minimizer_hint
        return float(0.5 * e @ (self.S @ e))

    def lambda_max(self):
        return float(linalg.eigvalsh(self.S)[-1])

    def level_set_theta(self, d, weights):
        """max { 1/2 sum_i w_i e_i^2 : 1/2 e^T S e <= d } for the restart scheme."""
        lam = linalg.eigh(np.diag(weights), self.S, eigvals_only=True)[-1]
        return float(d * lam)


def make_example2(n, seed=0, ridge=1e-6, bscale=1.0):
    """Symmetric S with all entries in [1, 2], positive definite, S_ii <= 2.

    S = 1 1^T + (1 - ridge) G + ridge I with G = B B^T / r, B uniform on
    [0, 1]^(n x r), r = n. Off-diagonal entries lie in [1, 2 - ridge], the
    diagonal in [1, 2], and lambda_min(S) >= ridge.
    """
    if n < 2:
        raise ContractError("n must be >= 2")
    rng = np.random.default_rng(seed)
    B = rng.random((n, n))
    G = B @ B.T / n
    S = np.ones((n, n)) + (1.0 - ridge) * G + ridge * np.eye(n)
    S = 0.5 * (S + S.T)
    x_hat = bscale * rng.uniform(-1.0, 1.0, n)
    b = S @ x_hat
    lam = linalg.eigvalsh(S)
    return QuadraticProblem(S, b, metadata={
        "kind": "example2", "n": n, "seed": seed, "ridge": ridge,
        "lambda_max": float(lam[-1]), "lambda_min": float(lam[0])})


def make_chain_quadratic(n):
    """f(x) = x_1^2 + sum_k (x_{k+1} - 2 x_k)^2; minimizer 0, f_* = 0."""
    if n < 2:
        raise ContractError("n must be >= 2")
    D = np.zeros((n, n))
    D[0, 0] = 1.0
    for k in range(n - 1):
        D[k + 1, k] = -2.0
        D[k + 1, k + 1] = 1.0
    S = 2.0 * D.T @ D
    prob = QuadraticProblem(S, np.zeros(n), metadata={"kind": "chain", "n": n}, solve=False)
    prob.minimizer_hint = np.zeros(n)
    prob.fstar_hint = 0.0
    return prob


def make_ridge_quadratic(n, mu=0.1, seed=0, scale=1.0):
    """S = G^T G / n + mu I with Gaussian G; b = S x_hat, x_hat uniform in [-1, 1]."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    S = G.T @ G / n + mu * np.eye(n)
    S = 0.5 * (S + S.T)
    b = S @ (scale * rng.uniform(-1.0, 1.0, n))
    return QuadraticProblem(S, b, metadata={"kind": "ridge", "n": n, "mu": mu, "seed": seed})


def make_heterogeneous_quadratic(lipschitz, rho=0.5, seed=0):
    """S = D^(1/2) C D^(1/2), C = (1 - rho) I + rho 1 1^T, so S_ii = L_i exactly."""
    L = np.asarray(lipschitz, dtype=float)
    n = L.size
    rng = np.random.default_rng(seed)
    C = (1.0 - rho) * np.eye(n) + rho * np.ones((n, n))
    s = np.sqrt(L)
    S = s[:, None] * C * s[None, :]
    b = S @ (rng.uniform(-1.0, 1.0, n) / s)
    return QuadraticProblem(S, b, metadata={"kind": "heterogeneous", "n": n, "rho": rho, "seed": seed})


def make_hub_quadratic(n=32, hub_lipschitz=100.0, coupling=0.99, seed=0):
    """Coordinate 0 is a stiff hub (L_0 = hub_lipschitz) coupled to all others (L_i = 1).

    S = D^(1/2) C D^(1/2) where C has unit diagonal and C_0j = coupling / sqrt(n - 1);
    the minimizer is uniform in [-1, 1]^n.
    """
    if n < 2 or not 0 <= coupling < 1:
        raise ContractError("need n >= 2 and coupling in [0, 1)")
    rng = np.random.default_rng(seed)
    C = np.eye(n)
    C[0, 1:] = C[1:, 0] = coupling / math.sqrt(n - 1)
    s = np.sqrt(np.r_[hub_lipschitz, np.ones(n - 1)])
    S = s[:, None] * C * s[None, :]
    b = S @ rng.uniform(-1.0, 1.0, n)
    return QuadraticProblem(S, b, metadata={"kind": "hub", "n": n, "coupling": coupling,
                                            "hub_lipschitz": hub_lipschitz, "seed": seed})


# --------------------------------------------------------------------------
# entropy linear programming


@dataclass(frozen=True)
class Certificate:
    feasibility: float
    gap: float
    theta_scale: float

    @property
    def scaled_feasibility(self):
        return self.theta_scale * self.feasibility


def entropy(x):
    x = np.asarray(x, dtype=float)
    pos = x > 0
    return float(np.sum(x[pos] * np.log(x[pos])))


@dataclass(frozen=True)
class EntropyLPInstance:
    """min sum x_i ln x_i over the simplex subject to A x = b.

    Row 0 of A is constant (all entries c), with b_0 = c, so the simplex
    constraint sum x_i = 1 follows from A x = b.
    """

    A: np.ndarray
    b: np.ndarray
    x_hat: np.ndarray
    seed: int = 0

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    def primal_value(self, x):
        return entropy(x)

    def to_json(self):
        return json.dumps({
            "kind": "entropy_lp", "m": self.m, "n": self.n, "seed": self.seed,
            "A": _triplets(self.A), "b": self.b.tolist(), "x_hat": self.x_hat.tolist()})


def _triplets(M):
    r, c = np.nonzero(M)
    return {"shape": list(M.shape), "rows": r.tolist(), "cols": c.tolist(),
            "vals": M[r, c].tolist()}


def _from_triplets(d):
    M = np.zeros(d["shape"])
    M[d["rows"], d["cols"]] = d["vals"]
    return M


def make_entropy_lp(n, m, seed=0):
    """Feasible entropy-LP instance with entries of A in [1, 2].

    Row 0 is a constant row c (c uniform in [1, 2]) so that the simplex
    constraint is implied; the other rows are uniform in [1, 2]. b = A x_hat
    with x_hat drawn from a flat Dirichlet (interior of the simplex).
    """
    if n < 2 or m < 1:
        raise ContractError("need n >= 2 and m >= 1")
    rng = np.random.default_rng(seed)
    A = rng.uniform(1.0, 2.0, (m, n))
    A[0, :] = rng.uniform(1.0, 2.0)
    x_hat = rng.dirichlet(np.ones(n))
    return EntropyLPInstance(A=A, b=A @ x_hat, x_hat=x_hat, seed=seed)


def logsumexp(t):
    mx = np.max(t)
    return float(mx + math.log(np.sum(np.exp(t - mx))))


def softmax(t):
    e = np.exp(t - np.max(t))
    return e / e.sum()


class DualPhi1(CoordProblem):
    """phi_1(y) = ln sum_i exp([A^T y]_i) - <y, b>, a function of y in R^m.

    Partials are (A x(y) - b)_r with x(y) the softmax of A^T y. Coordinate
    Lipschitz constants default to max_ij A_ij^2.
    """

    def __init__(self, instance, lipschitz=None, fstar=None, minimizer=None):
        self.instance = instance
        self.A = instance.A
        self.b = instance.b
        self.n = instance.m
        bound = float(np.max(self.A ** 2))
        self.lipschitz = np.full(self.n, bound) if lipschitz is None else np.asarray(lipschitz, float)
        # f_* of the primal equals -min phi_1
        self.fstar_hint = fstar
        self.minimizer_hint = minimizer

    def recover(self, y):
        return softmax(self.A.T @ y)

    def value(self, y):
        return logsumexp(self.A.T @ y) - float(y @ self.b)

    def partial(self, r, y):
        x = softmax(self.A.T @ y)
        return float(self.A[r] @ x - self.b[r])

    def full_gradient(self, y):
        return self.A @ softmax(self.A.T @ y) - self.b

    def hessian(self, y):
        x = softmax(self.A.T @ y)
        Ax = self.A * x
        return Ax @ self.A.T - np.outer(self.A @ x, self.A @ x)


class DualPhi2(CoordProblem):
    """phi_2(y) = sum_i exp([A^T y]_i - 1) - <y, b>.

    Curvature is unbounded, so ``lipschitz`` holds only starting estimates;
    runs on this dual are meant to use adaptive Lipschitz search.
    """

    adaptive_only = True
    max_exponent = 700.0

    def __init__(self, instance, lipschitz=None, fstar=None):
        self.instance = instance
        self.A = instance.A
        self.b = instance.b
        self.n = instance.m
        self.lipschitz = np.ones(self.n) if lipschitz is None else np.asarray(lipschitz, float)
        self.fstar_hint = fstar
        self.minimizer_hint = None

    def _exp(self, y):
        t = self.A.T @ y - 1.0
        mx = float(np.max(t))
        if mx > self.max_exponent:
            raise OverflowWarningError(mx)
        return np.exp(t)

    def recover(self, y):
        return self._exp(y)

    def value(self, y):
        return float(np.sum(self._exp(y)) - y @ self.b)

    def partial(self, r, y):
        return float(self.A[r] @ self._exp(y) - self.b[r])

    def full_gradient(self, y):
        return self.A @ self._exp(y) - self.b


def newton_phi1(instance, tol=1e-13, max_iter=200):
    """High-accuracy minimizer of phi_1 by damped Newton with pseudo-inverse steps.

    phi_1 is flat along directions w with A^T w = const * 1 (for the constant
    row, y + t e_0 changes A^T y by a constant), so the Hessian is singular;
    minimum-norm Newton steps handle that. Returns (y_star, f_star, gap_bound)
    where f_star = -phi_1(y_star) and gap_bound = 1/2 g^T H^+ g at the end.
    """
    phi = DualPhi1(instance)
    y = np.zeros(instance.m)
    dec = math.inf
    for _ in range(max_iter):
        g = phi.full_gradient(y)
        H = phi.hessian(y)
        step = -np.linalg.lstsq(H, g, rcond=1e-12)[0]
        dec = float(-g @ step)
        if dec / 2.0 <= tol:
            break
        t = 1.0
        f0 = phi.value(y)
        while phi.value(y + t * step) > f0 + 0.25 * t * float(g @ step) and t > 1e-12:
            t *= 0.5
        y = y + t * step
    return y, -phi.value(y), max(dec / 2.0, 0.0)


def recover_primal(state, instance, y_last, theta=None, dual="phi1"):
    """Weighted average of the recovery payloads and its certificate.

    ``state.payload_sum / state.payload_weight`` is the alpha-weighted mean of
    x(.) over the coupling points. The gap reported is f(x_bar) + phi(y_last),
    which is >= 0 whenever x_bar is feasible.
    """
    if state.payload_sum is None or state.payload_weight <= 0:
        raise ContractError("run recorded no recovery payloads")
    x_bar = state.payload_sum / state.payload_weight
    phi = DualPhi1(instance) if dual == "phi1" else DualPhi2(instance)
    feas = float(np.linalg.norm(instance.A @ x_bar - instance.b))
    gap = instance.primal_value(x_bar) + phi.value(y_last)
    if theta is None:
        theta = float(y_last @ y_last)
    return x_bar, Certificate(feasibility=feas, gap=abs(gap), theta_scale=math.sqrt(theta))


# --------------------------------------------------------------------------
# projection-type dual


class ProjectionDual(CoordProblem):
    """Dual of (L/2)||A x - b||^2 + (mu/2)||x - x_g||^2 over x in R^n.

    D(y) = ||A^T y||^2 / (2 mu) - <A^T y, x_g> + ||y||^2 / (2 L) + <y, b>,
    minimized over y in R^m; x(y) = x_g - A^T y / mu and the primal optimum is
    -min D. Coordinate Lipschitz constants are ||A_k||^2 / mu + 1 / L.
    """

    def __init__(self, A, b, x_g, mu, L):
        if mu <= 0 or L <= 0:
            raise ContractError("mu and L must be positive")
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.x_g = np.asarray(x_g, dtype=float)
        self.mu = float(mu)
        self.L = float(L)
        self.n = self.A.shape[0]
        self.lipschitz = np.sum(self.A ** 2, axis=1) / self.mu + 1.0 / self.L
        H = self.A @ self.A.T / self.mu + np.eye(self.n) / self.L
        rhs = self.A @ self.x_g - self.b
        self.minimizer_hint = linalg.solve(H, rhs, assume_a="pos")
        self.fstar_hint = self.value(self.minimizer_hint)

    def recover(self, y):
        return self.x_g - self.A.T @ y / self.mu

    def value(self, y):
        t = self.A.T @ y
        return float(t @ t / (2 * self.mu) - t @ self.x_g + y @ y / (2 * self.L) + y @ self.b)

    def partial(self, k, y):
        t = self.A.T @ y
        return float(self.A[k] @ (t / self.mu - self.x_g) + y[k] / self.L + self.b[k])

    def full_gradient(self, y):
        return self.A @ (self.A.T @ y / self.mu - self.x_g) + y / self.L + self.b

    def primal_value(self, x):
        r = self.A @ x - self.b
        return float(0.5 * self.L * r @ r + 0.5 * self.mu * (x - self.x_g) @ (x - self.x_g))


def make_projection_dual(A, b, x_g, mu, L):
    return ProjectionDual(A, b, x_g, mu, L)


# --------------------------------------------------------------------------
# serialization


def instance_from_spec(kind, n, m=None, seed=0, **params):
    """Deterministic generation from (kind, n, m, seed)."""
    if kind == "example2":
        return make_example2(n, seed, **params)
    if kind == "chain":
        return make_chain_quadratic(n)
    if kind == "ridge":
        return make_ridge_quadratic(n, seed=seed, **params)
    if kind == "heterogeneous":
        L = params.pop("lipschitz", None) or [100.0] + [1.0] * (n - 1)
        return make_heterogeneous_quadratic(L, seed=seed, **params)
    if kind == "hub":
        return make_hub_quadratic(n, seed=seed, **params)
    if kind == "entropy_lp":
        return make_entropy_lp(n, m, seed)
    raise ContractError(f"unknown instance kind {kind!r}")


def instance_to_json(instance):
    if isinstance(instance, EntropyLPInstance):
        return instance.to_json()
    if isinstance(instance, QuadraticProblem):
        return json.dumps({"kind": "quadratic", "n": instance.n,
                           "metadata": {k: v for k, v in instance.metadata.items()
                                        if isinstance(v, (int, float, str))},
                           "S": _triplets(instance.S), "b": instance.b.tolist()})
    raise ContractError(f"cannot serialize {type(instance).__name__}")


def instance_from_json(text):
    d = json.loads(text)
    if d["kind"] == "entropy_lp":
        return EntropyLPInstance(A=_from_triplets(d["A"]), b=np.array(d["b"]),
                                 x_hat=np.array(d["x_hat"]), seed=d.get("seed", 0))
    if d["kind"] == "quadratic":
        return QuadraticProblem(_from_triplets(d["S"]), np.array(d["b"]), d.get("metadata"))
    raise ContractError(f"unknown instance kind {d['kind']!r}")
