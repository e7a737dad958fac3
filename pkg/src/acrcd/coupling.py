"""Accelerated randomized coordinate descent by linear coupling.

Each iteration mixes a coordinate gradient step (sequence ``y``) with a
coordinate mirror step (sequence ``z``) at the point ``x = tau z + (1 - tau) y``.
With weighted sampling p_i = L_i**beta / S_beta the mirror input is the
importance-weighted partial ``alpha / p_i * partial_i f(x)`` and the prox
weights are L_i**(1 - 2 beta); every ``n`` in the step-size formulas becomes
``n_eff = S_beta`` (which equals ``n`` when beta = 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ContractError, DivergenceError, OracleError
from .sampler import CoordinateStream


class NonSmoothError(ArithmeticError):
    """Backtracking ran past the cap without finding an acceptable L."""


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Schedule:
    """Step parameters alpha_{k+1} and tau_k of the coupled method.

    ``simple``: alpha_{k+1} = (k + 2) / (2 n_eff^2), tau_k = 2 / (k + 2).
    ``recurrence`` (experimental): alpha_1 = 1 / n_eff^2 and alpha_{k+1} the
    positive root of n_eff^2 a^2 - a = n_eff^2 alpha_k^2; tau_k = 1 / (alpha_{k+1} n_eff^2).
    ``constant``: fixed (alpha, tau).
    """

    kind: str
    n_eff: float = 1.0
    alpha: float = 0.0
    tau: float = 0.0

    @classmethod
    def simple(cls, n_eff):
        return cls("simple", float(n_eff))

    @classmethod
    def recurrence(cls, n_eff):
        return cls("recurrence", float(n_eff))

    @classmethod
    def constant(cls, alpha, tau):
        return cls("constant", 1.0, float(alpha), float(tau))

    def __post_init__(self):
        if self.kind not in ("simple", "recurrence", "constant"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not (self.alpha > 0 and 0 < self.tau <= 1):
            raise ContractError("constant schedule needs alpha > 0 and tau in (0, 1]")
        if self.kind != "constant" and self.n_eff <= 0:
            raise ContractError("n_eff must be positive")

    def sequences(self, N):
        """Arrays (tau_0..tau_{N-1}, alpha_1..alpha_N)."""
        k = np.arange(N, dtype=float)
        if self.kind == "constant":
            return np.full(N, self.tau), np.full(N, self.alpha)
        n2 = self.n_eff ** 2
        if self.kind == "simple":
            return 2.0 / (k + 2.0), (k + 2.0) / (2.0 * n2)
        alphas = np.empty(N)
        a = 1.0 / n2
        for j in range(N):
            alphas[j] = a
            a = (1.0 + math.sqrt(1.0 + 4.0 * n2 * n2 * a * a)) / (2.0 * n2)
        return 1.0 / (alphas * n2), alphas


@dataclass
class RunConfig:
    theta: float
    d: float
    epsilon: float
    sigma: float = 0.1
    beta: float = 0.0
    seed: int = 0
    epoch_constant: float = 9.0
    adaptive_lipschitz: bool = False
    max_iters: int = 10 ** 9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if not 0 < self.sigma < 1:
            raise ContractError("sigma must lie in (0, 1)")
        if not (self.d > 0 and self.theta > 0):
            raise ContractError("d and theta must be positive")
        if not 0 <= self.beta <= 1:
            raise ContractError("beta must lie in [0, 1]")

    @property
    def rounds(self):
        return max(0, math.ceil(math.log2(self.d / self.epsilon) - 1e-12))

    @property
    def replicas(self):
        return max(1, math.ceil(math.log2(max(self.rounds, 1) / self.sigma)))


@dataclass
class CouplingState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    k: int = 0
    xbar_sum: Optional[np.ndarray] = None
    xbar_weight: float = 0.0
    payload_sum: Optional[np.ndarray] = None
    payload_weight: float = 0.0
    coord_calls: int = 0
    value_calls: int = 0
    coords: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    lipschitz: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)

    @property
    def xbar(self):
        return self.xbar_sum / self.xbar_weight


# --------------------------------------------------------------------------
# shared loop


class _Steps:
    """Per-coordinate step factors 1/L_i (gradient) and 1/(p_i w_i) (mirror)."""

    def __init__(self, problem, norm, tree, adaptive=False, beta=0.0):
        self.problem = problem
        self.norm = norm.copy() if adaptive else norm
        self.tree = tree.copy() if adaptive else tree
        self.L = np.array(norm.lipschitz, dtype=float)
        self.beta = beta
        self.adaptive = adaptive
        self.next_L = self.L.copy()
        self.floor = self.L * 2.0 ** -30
        self._refresh()

    def _refresh(self):
        leaves = self.tree.leaf_weights
        with np.errstate(divide="ignore"):
            self.inv_L = 1.0 / self.L
            self.mirror = np.where(leaves > 0, self.tree.total / (leaves * self.norm.weights), 0.0)

    def adapt(self, i, x, g, state):
        L_new, calls = _backtrack(self.problem, i, x, g, self.next_L[i])
        state.value_calls += calls
        self.next_L[i] = max(L_new / 2.0, self.floor[i])
        if L_new != self.L[i]:
            self.L[i] = L_new
            self.norm.update(i, L_new)
            if self.beta > 0:
                self.tree.update_weight(i, L_new ** self.beta)
            self._refresh()


def _coupled_run(problem, steps, stream, x0, taus, alphas, *, average=False,
                 payload=None, callback=None, record_coords=False, check_every=64):
    x0 = np.asarray(x0, dtype=float)
    y = x0.copy()
    z = x0.copy()
    x = x0.copy()
    state = CouplingState(x=x, y=y, z=z)
    if average:
        state.xbar_sum = np.zeros_like(x0)
    adaptive = steps.adaptive
    partial = problem.partial
    N = len(taus)
    for k in range(N):
        tau = taus[k]
        a = alphas[k]
        np.multiply(z, tau, out=x)
        x += (1.0 - tau) * y
        if average:
            state.xbar_sum += x
            state.xbar_weight += 1.0
        if payload is not None:
            p = payload(x)
            if state.payload_sum is None:
                state.payload_sum = a * p
            else:
                state.payload_sum += a * p
            state.payload_weight += a
        i = stream.next()
        g = partial(i, x)
        state.coord_calls += 1
        if not math.isfinite(g):
            raise DivergenceError(f"non-finite partial at iteration {k + 1}",
                                  state.trace, k + 1) from OracleError(i, x, g)
        if adaptive:
            steps.adapt(i, x, g, state)
        np.copyto(y, x)
        y[i] -= g * steps.inv_L[i]
        z[i] -= a * g * steps.mirror[i]
        state.k = k + 1
        if record_coords:
            state.coords.append(i)
            state.taus.append(tau)
        if callback is not None:
            callback(k + 1, state)
        if (k + 1) % check_every == 0 and not np.isfinite(z).all():
            raise DivergenceError(f"non-finite iterate at iteration {k + 1}", state.trace, k + 1)
    if not (np.isfinite(y).all() and np.isfinite(z).all()):
        raise DivergenceError("non-finite iterate", state.trace, N)
    state.lipschitz = steps.L
    return state


def _backtrack(problem, i, x, g, L_start, cap_factor=2.0 ** 60):
    """Smallest L = L_start * 2^j passing the coordinate descent test."""
    fx = problem.value(x)
    calls = 1
    L = L_start
    slack = 1e-14 * max(1.0, abs(fx))
    y = np.array(x, dtype=float, copy=True)
    xi = y[i]
    while True:
        y[i] = xi - g / L
        calls += 1
        if problem.value(y) <= fx - g * g / (2.0 * L) + slack:
            return L, calls
        L *= 2.0
        if L > cap_factor * L_start:
            raise NonSmoothError(f"coordinate {i}: no acceptable Lipschitz constant below {L}")


def adapt_lipschitz(problem, tree, i, x, L_current, beta=0.0, g=None):
    """Doubling search for a coordinate Lipschitz estimate at ``x``.

    Returns the accepted L; the caller is expected to start the next search
    at L / 2. When ``beta > 0`` the tree leaf is set to L**beta.
    """
    if L_current <= 0:
        raise ContractError("L_current must be positive")
    if g is None:
        g = problem.partial(i, x)
    L, _ = _backtrack(problem, i, x, g, L_current)
    if beta > 0:
        tree.update_weight(i, L ** beta)
    return L


# --------------------------------------------------------------------------
# ACRCD


def acrcd_epoch(problem, norm, tree, x0, alpha, tau, K, rng, *, adaptive=False,
                callback=None, return_state=False):
    """K coupled steps with constant (alpha, tau); returns the mean of x_1..x_K."""
    if not (0 < tau < 1) or alpha <= 0 or K < 1:
        raise ContractError("need tau in (0, 1), alpha > 0, K >= 1")
    steps = _Steps(problem, norm, tree, adaptive, norm.beta)
    stream = CoordinateStream(steps.tree, rng, dynamic=adaptive)
    state = _coupled_run(problem, steps, stream, x0, np.full(K, tau), np.full(K, alpha),
                         average=True, callback=callback)
    return (state.xbar, state) if return_state else state.xbar


def epoch_parameters(n_eff, theta, d, epoch_constant=9.0):
    """(alpha, tau, K) for one epoch at gap level d."""
    alpha = math.sqrt(theta / d) / n_eff
    tau = 1.0 / (alpha * n_eff ** 2 + 1.0)
    K = max(1, math.ceil(epoch_constant * n_eff * math.sqrt(theta / d)))
    return alpha, tau, K


def markov_amplify(run, replicas, problem, rng):
    """Run ``replicas`` independent candidates and keep the one with least f.

    ``run`` receives a fresh Generator (an independent substream of ``rng``)
    and returns a candidate point.
    """
    if replicas < 1:
        raise ContractError("replicas must be >= 1")
    best = None
    best_f = math.inf
    for child in rng.spawn(replicas):
        cand = run(child)
        f = problem.value(cand)
        if best is None or f < best_f:
            best, best_f = cand, f
    return best


@dataclass
class RestartResult:
    x: np.ndarray
    rounds: int
    replicas: int
    coord_calls: int
    value_calls: int
    budget_exhausted: bool = False
    round_outputs: list = field(default_factory=list)
    round_levels: list = field(default_factory=list)


def acrcd_restart(problem, norm, tree, config, rng, x0=None, callback=None):
    """Restarted ACRCD with Markov amplification at every gap level.

    Round r (r = 0, ..., R - 1 with R = ceil(log2(d / eps))) targets
    d_r = d / 2^r; R = 0 still runs one amplified epoch at level d.
    """
    n_eff = tree.total
    x = np.zeros(problem.n) if x0 is None else np.asarray(x0, dtype=float)
    R = config.rounds
    reps = config.replicas
    result = RestartResult(x=x, rounds=0, replicas=reps, coord_calls=0, value_calls=0)
    for r in range(max(R, 1)):
        d_r = config.d / 2.0 ** r
        alpha, tau, K = epoch_parameters(n_eff, config.theta, d_r, config.epoch_constant)
        if result.coord_calls + reps * K > config.max_iters:
            result.budget_exhausted = True
            break
        start = x
        epoch_calls = [0, 0]

        def one(child, start=start):
            xb, st = acrcd_epoch(problem, norm, tree, start, alpha, tau, K, child,
                                 adaptive=config.adaptive_lipschitz, return_state=True)
            epoch_calls[0] += st.coord_calls
            epoch_calls[1] += st.value_calls
            return xb

        x = markov_amplify(one, reps, problem, rng)
        result.coord_calls += epoch_calls[0]
        result.value_calls += epoch_calls[1] + reps
        result.rounds = r + 1 if R > 0 else 0
        result.round_outputs.append(x)
        result.round_levels.append(d_r)
        if callback is not None:
            callback(r, x, result)
    result.x = x
    return result


def restart_call_bound(n_eff, theta, epsilon, d, sigma):
    """27 n sqrt(theta / eps) log2(log2(d / eps) / sigma)."""
    R = max(math.log2(d / epsilon), 1.0)
    return 27.0 * n_eff * math.sqrt(theta / epsilon) * math.log2(R / sigma)


# --------------------------------------------------------------------------
# ACRCD*


def acrcd_star(problem, norm, tree, x0, N, schedule=None, rng=None, *, adaptive=False,
               payload=None, callback=None, record_coords=False):
    """N steps with the step-dependent schedule; returns (y_N, state).

    ``payload``, if given, maps the coupling point x_{k+1} to a vector that is
    accumulated with weight alpha_{k+1} (for primal recovery on dual problems).
    """
    if N < 1:
        raise ContractError("N must be >= 1")
    if schedule is None:
        schedule = Schedule.simple(tree.total)
    if schedule.kind == "constant":
        raise ContractError("acrcd_star needs a simple or recurrence schedule")
    if rng is None:
        rng = np.random.default_rng()
    steps = _Steps(problem, norm, tree, adaptive, norm.beta)
    stream = CoordinateStream(steps.tree, rng, dynamic=adaptive)
    taus, alphas = schedule.sequences(N)
    state = _coupled_run(problem, steps, stream, x0, taus, alphas, payload=payload,
                         callback=callback, record_coords=record_coords)
    return state.y.copy(), state


def star_iterations(n_eff, theta, epsilon):
    """N = ceil(2 n_eff sqrt(theta / eps)), enough for E f(y_N) - f_* <= eps."""
    return max(1, math.ceil(2.0 * n_eff * math.sqrt(theta / epsilon)))


@dataclass
class StrongConvexResult:
    x: np.ndarray
    restarts: int
    coord_calls: int
    outputs: list = field(default_factory=list)
    thetas: list = field(default_factory=list)


def restart_length(n_eff, mu, c_sc=2.0 * math.sqrt(2.0)):
    """ceil(c_sc n_eff / sqrt(mu)); the default halves the distance bound per restart."""
    return max(1, math.ceil(c_sc * n_eff / math.sqrt(mu)))


def acrcd_star_strongly_convex(problem, norm, tree, x0, mu, theta0, epsilon, rng, *,
                               c_sc=2.0 * math.sqrt(2.0), adaptive=False, max_restarts=200):
    """Distance-halving restarts of ACRCD* for a mu-strongly convex objective.

    ``mu`` is measured in ``norm`` and ``theta0`` bounds 1/2 ||x0 - x_*||^2.
    """
    if mu <= 0:
        raise ContractError("mu must be positive")
    x = np.asarray(x0, dtype=float).copy()
    theta = float(theta0)
    N = restart_length(tree.total, mu, c_sc)
    out = StrongConvexResult(x=x, restarts=0, coord_calls=0, thetas=[theta])
    while mu * theta > epsilon and out.restarts < max_restarts:
        x, st = acrcd_star(problem, norm, tree, x, N, Schedule.simple(tree.total), rng,
                           adaptive=adaptive)
        out.coord_calls += st.coord_calls
        out.restarts += 1
        theta /= 2.0
        out.outputs.append(x)
        out.thetas.append(theta)
    out.x = x
    return out


# --------------------------------------------------------------------------
# full-gradient baseline


def accelerated_full_gradient(problem, x0, N, L, callback=None):
    """Linear-coupling accelerated gradient method in the Euclidean norm.

    Same schedule as ACRCD* with n_eff = 1 and global Lipschitz constant L.
    Each iteration uses one full gradient (n coordinate calls).
    """
    x0 = np.asarray(x0, dtype=float)
    y = x0.copy()
    z = x0.copy()
    for k in range(N):
        tau = 2.0 / (k + 2.0)
        a = (k + 2.0) / (2.0 * L)
        x = tau * z + (1.0 - tau) * y
        g = problem.full_gradient(x)
        y = x - g / L
        z = z - a * g
        if callback is not None:
            callback(k + 1, y)
    return y
