"""Entropic risk-averse Q-learning over tabular MDPs.

Everything here works on costs (negated rewards), so policies are argmins.
Transition models are dense ``P[s, a, s']`` arrays; internally they are
compacted to their (at most a few) nonzero successors per state-action.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp_core import TIE_ORDER


class ConvergenceError(RuntimeError):
    pass


class CoverageError(ValueError):
    def __init__(self, missing):
        self.missing = [tuple(int(v) for v in m) for m in missing]
        super().__init__(f"insufficient coverage: {len(self.missing)} state-action pairs "
                         f"have no samples, e.g. {self.missing[:5]}")


@dataclass(frozen=True)
class EntropicParams:
    alpha: float = 0.2
    gamma: float = 0.3

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be a finite value >= 0, got {self.alpha}")
        if not (0 < self.gamma <= 1):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class WeightFn:
    w: np.ndarray
    upsilon: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.w) < 1):
            raise ValueError("weights must be >= 1")
        if not self.upsilon > 0:
            raise ValueError("upsilon must be positive")

    @classmethod
    def uniform(cls, n_states: int) -> WeightFn:
        return cls(np.ones(n_states), 1.0)

    def admissible(self, P: np.ndarray, atol: float = 1e-12) -> bool:
        """``sup_a E[w(s')] <= upsilon * w(s)`` for every state."""
        expected = (P @ self.w).max(axis=1)
        return bool(np.all(expected <= self.upsilon * self.w + atol))

    def norm(self, x: np.ndarray) -> float:
        x = np.asarray(x)
        w = self.w.reshape((-1,) + (1,) * (x.ndim - 1))
        return float(np.max(np.abs(x) / w))


@dataclass
class QTable:
    values: np.ndarray  # (S, A)
    alpha: float = 0.0
    gamma: float = 1.0
    shape: tuple[int, int] | None = None  # (m, n) when the states are grid cells

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Q-table entries must be finite")

    def to_json(self) -> str:
        m, n = self.shape if self.shape else (self.values.shape[0], 1)
        return json.dumps({
            "m": m, "n": n, "n_actions": self.values.shape[1],
            "alpha": self.alpha, "gamma": self.gamma,
            # row-major over (row, col, action)
            "values": self.values.reshape(-1).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> QTable:
        d = json.loads(text)
        values = np.array(d["values"], dtype=float).reshape(d["m"] * d["n"], d["n_actions"])
        return cls(values, d["alpha"], d["gamma"], (d["m"], d["n"]))


@dataclass(frozen=True)
class PlanPolicy:
    actions: np.ndarray  # (S,) action index per state
    horizon: int = 0

    def __call__(self, s: int) -> int:
        return int(self.actions[s])


# ------------------------------------------------------------ aggregators

def discounted_cost(costs: Sequence[float], gamma: float) -> float:
    costs = np.asarray(costs, dtype=float)
    return float(np.sum(costs * gamma ** np.arange(costs.size)))


def _entropic(values: np.ndarray, weights: np.ndarray, alpha: float, axis: int = -1) -> np.ndarray:
    """``(1/alpha) log sum_k w_k exp(alpha v_k)`` along ``axis``; weights sum to 1.

    Zero-weight entries are ignored (they may hold any finite placeholder).
    """
    if alpha == 0:
        return np.sum(weights * values, axis=axis)
    live = weights > 0
    shift = np.max(np.where(live, values, -np.inf), axis=axis, keepdims=True)
    z = weights * np.exp(alpha * np.where(live, values - shift, -np.inf))
    with np.errstate(divide="ignore"):
        exact = np.squeeze(shift, axis=axis) + np.log(np.sum(z, axis=axis)) / alpha
    # When alpha * spread is tiny the log above is swamped by rounding in the
    # weights (divided by alpha); the cumulant series is exact to O((alpha*spread)^3).
    spread = np.squeeze(shift, axis=axis) - np.min(np.where(live, values, np.inf), axis=axis)
    small = alpha * spread < 1e-5
    if not np.any(small):
        return exact
    w = np.where(live, weights, 0.0)
    w = w / np.sum(w, axis=axis, keepdims=True)
    v = np.where(live, values - shift, 0.0)
    mu = np.sum(w * v, axis=axis, keepdims=True)
    k2 = np.sum(w * (v - mu) ** 2, axis=axis)
    k3 = np.sum(w * (v - mu) ** 3, axis=axis)
    series = np.squeeze(shift + mu, axis=axis) + alpha * k2 / 2 + alpha ** 2 * k3 / 6
    return np.where(small, series, exact)


def entropic_value(samples: Sequence[float], alpha: float, weights: Sequence[float] | None = None) -> float:
    """Entropic risk of a cost sample set; the sample mean when ``alpha == 0``."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    return float(_entropic(x, w, alpha))


def mean_variance_value(samples: Sequence[float], alpha: float) -> float:
    """Second-order expansion ``E + (alpha/2) Var`` of the entropic value."""
    x = np.asarray(samples, dtype=float)
    return float(x.mean() + 0.5 * alpha * x.var())


# ------------------------------------------------------------- operators

@dataclass(frozen=True)
class Support:
    """Nonzero successors of each state-action: ``idx``/``prob`` of shape (S, A, K)."""

    idx: np.ndarray
    prob: np.ndarray

    @classmethod
    def of(cls, P: np.ndarray) -> Support:
        P = np.asarray(P, dtype=float)
        k = max(1, int((P > 0).sum(axis=2).max()))
        order = np.argsort(-P, axis=2, kind="stable")[..., :k]
        prob = np.take_along_axis(P, order, axis=2)
        return cls(order, prob)


def _support(P) -> Support:
    return P if isinstance(P, Support) else Support.of(P)


def _backup(V: np.ndarray, sup: Support, cost: np.ndarray, p: EntropicParams) -> np.ndarray:
    return cost + _entropic(p.gamma * V[sup.idx], sup.prob, p.alpha)


def bellman_apply(Q: np.ndarray, policy, P, cost: np.ndarray, p: EntropicParams) -> np.ndarray:
    """Policy operator: successors continue with ``policy(s')``."""
    acts = policy.actions if isinstance(policy, PlanPolicy) else np.asarray(policy)
    V = Q[np.arange(Q.shape[0]), acts]
    return _backup(V, _support(P), cost, p)


def optimal_bellman(Q: np.ndarray, P, cost: np.ndarray, p: EntropicParams) -> np.ndarray:
    """Optimal operator: each successor continues with its best action."""
    return _backup(Q.min(axis=1), _support(P), cost, p)


@dataclass
class IterationResult:
    Q: np.ndarray
    iterations: int
    last_change: float
    error_bound: float
    history: list[float] = field(default_factory=list)


def value_iterate(Q0: np.ndarray, P, cost: np.ndarray, p: EntropicParams, tol: float = 1e-10,
                  max_iters: int = 10_000, weight: WeightFn | None = None,
                  policy=None) -> IterationResult:
    """Fixed-point iteration of the optimal operator (or a policy operator).

    Stops when the weighted sup-norm change is at most ``tol``; the returned
    ``error_bound`` is the a-posteriori distance to the fixed point.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    sup = _support(P)
    weight = weight or WeightFn.uniform(Q0.shape[0])
    rate = weight.upsilon * p.gamma
    if rate >= 1:
        raise ValueError(f"contraction factor upsilon*gamma = {rate} must be < 1")
    Q = np.array(Q0, dtype=float)
    history = []
    for it in range(1, max_iters + 1):
        if policy is None:
            Qn = optimal_bellman(Q, sup, cost, p)
        else:
            Qn = bellman_apply(Q, policy, sup, cost, p)
        change = weight.norm(Qn - Q)
        history.append(change)
        Q = Qn
        if change <= tol:
            return IterationResult(Q, it, change, change * rate / (1 - rate), history)
    raise ConvergenceError(f"no convergence after {max_iters} iterations (last change {change:.3e})")


def greedy_policy(Q: np.ndarray, P, cost: np.ndarray, p: EntropicParams,
                  rtol: float = 1e-12) -> PlanPolicy:
    """Argmin of the one-step entropic lookahead; near-ties go to straight, left, right."""
    look = optimal_bellman(Q, P, cost, p)
    order = np.array(TIE_ORDER)
    ranked = look[:, order]
    best = ranked.min(axis=1, keepdims=True)
    close = ranked <= best + rtol * np.maximum(1.0, np.abs(best))
    return PlanPolicy(order[np.argmax(close, axis=1)], horizon=0)


# --------------------------------------------------------------- samples

CostSampler = Callable[[np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass
class SampleSet:
    """Sampled constraint tuples ``(s, a, s', a')``.

    Each tuple carries ``K`` inner realisations: successor ``succ[i, k]``, the
    successor action ``succ_action[i, k]``, the realised cost ``cost[i, k]``
    and a weight (``1/iota`` for sampled tuples, the exact transition
    probability for enumerated ones).
    """

    s: np.ndarray
    a: np.ndarray
    succ: np.ndarray
    succ_action: np.ndarray
    cost: np.ndarray
    weight: np.ndarray
    n_states: int
    n_actions: int

    def __len__(self) -> int:
        return self.s.size

    @property
    def inner(self) -> int:
        return self.succ.shape[1]

    @property
    def mean_cost(self) -> np.ndarray:
        return np.sum(self.weight * self.cost, axis=1)

    def pair(self) -> np.ndarray:
        return self.s * self.n_actions + self.a

    def missing_pairs(self) -> np.ndarray:
        seen = np.zeros(self.n_states * self.n_actions, bool)
        seen[self.pair()] = True
        return np.argwhere(~seen.reshape(self.n_states, self.n_actions))

    def concat(self, other: SampleSet) -> SampleSet:
        if other.inner != self.inner:
            raise ValueError("inner sample counts differ")
        cat = lambda f: np.concatenate([getattr(self, f), getattr(other, f)])
        return SampleSet(cat("s"), cat("a"), cat("succ"), cat("succ_action"), cat("cost"),
                         cat("weight"), self.n_states, self.n_actions)

    def deduplicated(self) -> SampleSet:
        key = np.concatenate([self.s[:, None], self.a[:, None], self.succ, self.succ_action], axis=1)
        _, keep = np.unique(key, axis=0, return_index=True)
        keep.sort()
        return SampleSet(self.s[keep], self.a[keep], self.succ[keep], self.succ_action[keep],
                         self.cost[keep], self.weight[keep], self.n_states, self.n_actions)


def random_policies(n_states: int, n_actions: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n_actions, size=(count, n_states))


def collect_samples(P: np.ndarray, cost_sampler: CostSampler, n_policies: int, n_per_policy: int,
                    inner: int, rng: np.random.Generator, policies: np.ndarray | None = None,
                    dedupe: bool = False) -> SampleSet:
    """Generate tuples from previewed quantities only.

    For each exploration policy, states are drawn uniformly, the action is the
    policy's, ``inner`` successors are drawn from ``P`` and the successor
    action is again the policy's.
    """
    if n_policies < 1 or n_per_policy < 1 or inner < 1:
        raise ValueError("n_policies, n_per_policy and inner must all be >= 1")
    P = np.asarray(P)
    S, A, _ = P.shape
    if policies is None:
        policies = random_policies(S, A, n_policies, rng)
    cdf = np.cumsum(P, axis=2)
    cdf[..., -1] = 1.0
    chunks = []
    for pol in policies[:n_policies]:
        s = rng.integers(0, S, size=n_per_policy)
        a = pol[s]
        u = rng.random((n_per_policy, inner))
        rows = cdf[s, a]  # (N, S)
        succ = np.array([np.searchsorted(rows[i], u[i], side="right") for i in range(n_per_policy)])
        succ = np.minimum(succ, S - 1)
        chunks.append((s, a, succ, pol[succ]))
    s = np.concatenate([c[0] for c in chunks])
    a = np.concatenate([c[1] for c in chunks])
    succ = np.concatenate([c[2] for c in chunks])
    succ_action = np.concatenate([c[3] for c in chunks])
    cost = np.asarray(cost_sampler(s, a, succ, rng), dtype=float).reshape(succ.shape)
    weight = np.full(succ.shape, 1.0 / inner)
    out = SampleSet(s, a, succ, succ_action, cost, weight, S, A)
    return out.deduplicated() if dedupe else out


def coverage_samples(P: np.ndarray, cost_sampler: CostSampler, pairs: np.ndarray, inner: int,
                     rng: np.random.Generator, policy: np.ndarray) -> SampleSet:
    """One extra tuple for each listed ``(s, a)`` pair (used to close coverage gaps)."""
    P = np.asarray(P)
    S, A, _ = P.shape
    s, a = pairs[:, 0], pairs[:, 1]
    cdf = np.cumsum(P[s, a], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((len(s), inner))
    succ = np.minimum(np.array([np.searchsorted(cdf[i], u[i], side="right") for i in range(len(s))]), S - 1)
    succ = succ.reshape(len(s), inner)
    cost = np.asarray(cost_sampler(s, a, succ, rng), dtype=float).reshape(succ.shape)
    return SampleSet(s, a, succ, policy[succ], cost, np.full(succ.shape, 1.0 / inner), S, A)


def exhaustive_samples(P: np.ndarray, cost: np.ndarray) -> SampleSet:
    """Every constraint of the exact program.

    For each ``(s, a)`` one tuple per assignment of successor actions over the
    support of ``P[s, a]``, weighted by the exact transition probabilities.
    Only sensible for small models (``A ** support`` tuples per pair).
    """
    sup = Support.of(P)
    S, A, K = sup.idx.shape
    rows = {f: [] for f in ("s", "a", "succ", "succ_action", "cost", "weight")}
    for s in range(S):
        for a in range(A):
            live = sup.prob[s, a] > 0
            k = int(live.sum())
            idx = sup.idx[s, a]
            prob = np.where(live, sup.prob[s, a], 0.0)
            for combo in itertools.product(range(A), repeat=k):
                acts = np.zeros(K, dtype=int)
                acts[:k] = combo
                rows["s"].append(s)
                rows["a"].append(a)
                rows["succ"].append(idx)
                rows["succ_action"].append(acts)
                rows["cost"].append(np.full(K, cost[s, a]))
                rows["weight"].append(prob)
    arr = {f: np.array(v) for f, v in rows.items()}
    return SampleSet(arr["s"], arr["a"], arr["succ"], arr["succ_action"], arr["cost"],
                     arr["weight"], S, A)


def _group_reduce(values: np.ndarray, keys: np.ndarray, n_keys: int, ufunc) -> np.ndarray:
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
    out = np.full(n_keys, np.nan)
    out[k[starts]] = ufunc.reduceat(values[order], starts)
    return out


def empirical_operator(Q: np.ndarray, D: SampleSet, p: EntropicParams, mode: str = "min") -> np.ndarray:
    """Sampled Bellman operator; uncovered pairs come back as NaN.

    ``mode="policy"`` keeps each tuple as one constraint with its recorded
    successor actions, and a pair's value is the tightest of its constraints.
    ``mode="min"`` pools every inner sample of a pair into one empirical
    successor distribution and lets each sampled successor take its best
    action, which is the tightest bound over all successor-action assignments.
    """
    S, A = D.n_states, D.n_actions
    keys = D.pair()
    if mode == "policy":
        rhs = D.mean_cost + _entropic(p.gamma * Q[D.succ, D.succ_action], D.weight, p.alpha)
        return _group_reduce(rhs, keys, S * A, np.minimum).reshape(S, A)
    if mode != "min":
        raise ValueError(f"unknown mode {mode!r}")
    counts = np.bincount(keys, minlength=S * A).astype(float)
    share = 1.0 / counts[keys]  # each tuple of a pair counts equally
    c_hat = np.bincount(keys, weights=D.mean_cost * share, minlength=S * A)
    vals = p.gamma * Q.min(axis=1)[D.succ]  # (N, K)
    w = D.weight * share[:, None]
    flat_keys = np.repeat(keys, D.inner)
    live = w.reshape(-1) > 0
    v, wf, fk = vals.reshape(-1)[live], w.reshape(-1)[live], flat_keys[live]
    if p.alpha == 0:
        ent = np.bincount(fk, weights=wf * v, minlength=S * A)
    else:
        shift = _group_reduce(v, fk, S * A, np.maximum)
        z = np.bincount(fk, weights=wf * np.exp(p.alpha * (v - shift[fk])), minlength=S * A)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = shift + np.log(z) / p.alpha
    out = c_hat + ent
    out[counts == 0] = np.nan
    return out.reshape(S, A)


@dataclass
class ProgramResult:
    Q: np.ndarray
    iterations: int
    objective: float
    max_violation: float
    coverage_added: int = 0


def solve_sampled_program(D: SampleSet, p: EntropicParams, tol: float = 1e-10,
                          max_iters: int = 10_000, objective_weights: np.ndarray | None = None,
                          mode: str = "min") -> ProgramResult:
    """Largest ``Q`` (weighted by ``objective_weights``) meeting every sampled constraint.

    The sampled operator is monotone and a ``gamma``-contraction, so the
    feasible set has a greatest element, its fixed point.  Iteration starts
    from a uniform lower bound and rises monotonically to it.
    """
    missing = D.missing_pairs()
    if len(missing):
        raise CoverageError(missing)
    if p.gamma >= 1:
        raise ValueError("the sampled program needs gamma < 1")
    lo = min(0.0, float(D.cost.min())) / (1 - p.gamma)
    Q = np.full((D.n_states, D.n_actions), lo)
    for it in range(1, max_iters + 1):
        Qn = empirical_operator(Q, D, p, mode)
        change = float(np.max(np.abs(Qn - Q)))
        Q = Qn
        if change <= tol:
            break
    else:
        raise ConvergenceError(f"bound certificate failed: change {change:.3e} after {max_iters} iterations")
    violation = float(np.max(Q - empirical_operator(Q, D, p, mode)))
    if violation > tol:
        raise ConvergenceError(f"bound certificate failed: violation {violation:.3e}")
    c = np.ones_like(Q) if objective_weights is None else objective_weights
    return ProgramResult(Q, it, float(np.sum(c * Q)), violation)


def constraint_violations(Q: np.ndarray, D: SampleSet, p: EntropicParams) -> np.ndarray:
    """Per-tuple excess ``Q(s, a) - rhs`` of the recorded-action constraints."""
    rhs = D.mean_cost + _entropic(p.gamma * Q[D.succ, D.succ_action], D.weight, p.alpha)
    return Q[D.s, D.a] - rhs


def sample_bound(epsilon: float, beta_bar: float, n_q: int) -> int:
    """Tuples needed for violation level ``epsilon`` at confidence ``beta_bar``."""
    if not (0 < epsilon <= 1):
        raise ValueError("epsilon must lie in (0, 1]")
    if not (0 < beta_bar < 1):
        raise ValueError("beta_bar must lie in (0, 1)")
    if n_q < 1:
        raise ValueError("n_q must be positive")
    return math.ceil((n_q + math.log(1.0 / beta_bar)) / epsilon)
