from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .errors import InvalidModelError, NonUnichainError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

# Tolerances shared by every module.
SIMPLEX_TOL = 1e-9
RESIDUAL_TOL = 1e-8


def frozen_array(values: ArrayLike) -> FloatArray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Violation:
    field: str
    index: tuple[int, ...]
    message: str

    def __str__(self) -> str:
        idx = ",".join(str(i) for i in self.index)
        return f"{self.field}[{idx}]: {self.message}"


@dataclass(frozen=True)
class Cmdp:
    """
    Finite constrained MDP with known costs.

    Shapes:
      transitions: (S, A, S), row (s, a) is p(.|s,a)
      costs:       (m + 1, S, A), component 0 is the minimized cost
      thresholds:  (m,)
    """

    transitions: FloatArray
    costs: FloatArray
    thresholds: FloatArray
    initial_state: int = 0

    def __post_init__(self) -> None:
        p = frozen_array(self.transitions)
        c = frozen_array(self.costs)
        tau = frozen_array(self.thresholds).reshape(-1)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] == 0 or p.shape[1] == 0:
            raise InvalidModelError(f"transitions must have shape (S, A, S), got {p.shape}")
        if c.ndim != 3 or c.shape[1:] != p.shape[:2] or c.shape[0] == 0:
            raise InvalidModelError(f"costs must have shape (m+1, {p.shape[0]}, {p.shape[1]}), got {c.shape}")
        if tau.shape[0] != c.shape[0] - 1:
            raise InvalidModelError(f"expected {c.shape[0] - 1} thresholds, got {tau.shape[0]}")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "thresholds", tau)
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.thresholds.shape[0]

    def with_transitions(self, transitions: ArrayLike) -> "Cmdp":
        return Cmdp(transitions, self.costs, self.thresholds, self.initial_state)

    def with_thresholds(self, thresholds: ArrayLike) -> "Cmdp":
        return Cmdp(self.transitions, self.costs, thresholds, self.initial_state)


@dataclass(frozen=True)
class StationaryPolicy:
    probs: FloatArray

    def __post_init__(self) -> None:
        probs = frozen_array(self.probs)
        if probs.ndim != 2 or 0 in probs.shape:
            raise InvalidModelError(f"policy must have shape (S, A), got {probs.shape}")
        bad = np.any(probs < 0, axis=1) | (np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOL)
        if bad.any():
            rows = [Violation("probs", (int(s),), "row is not a distribution") for s in np.flatnonzero(bad)]
            raise InvalidModelError("invalid policy", rows)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StationaryPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: ArrayLike, n_actions: int) -> "StationaryPolicy":
        acts = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((acts.shape[0], n_actions))
        probs[np.arange(acts.shape[0]), acts] = 1.0
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class PolicyEvaluation:
    loss: FloatArray  # (m + 1,)
    bias: FloatArray  # (m + 1, S), min over states is 0
    stationary_dist: FloatArray  # (S,)

    def span(self, component: int) -> float:
        return float(self.bias[component].max())


@dataclass(frozen=True)
class Diagnostics:
    span: float
    hitting_time_estimate: float
    cover_time_bound: float
    hitting_time_bound: Optional[float] = None

    @property
    def within_bound(self) -> Optional[bool]:
        if self.hitting_time_bound is None:
            return None
        return self.hitting_time_estimate <= self.hitting_time_bound


def validate(model: Cmdp) -> list[Violation]:
    """Return every violated Cmdp invariant; an empty list means the model is valid."""
    out: list[Violation] = []
    p = model.transitions
    S, A = model.n_states, model.n_actions
    for s in range(S):
        for a in range(A):
            row = p[s, a]
            if not np.all(np.isfinite(row)):
                out.append(Violation("transitions", (s, a), "non-finite probability"))
                continue
            if np.any(row < 0):
                out.append(Violation("transitions", (s, a), f"negative probability {row.min():.3g}"))
            total = float(row.sum())
            if abs(total - 1.0) > SIMPLEX_TOL:
                out.append(Violation("transitions", (s, a), f"row sums to {total:.12g}, expected 1"))
    bad_cost = ~np.isfinite(model.costs) | (model.costs < 0) | (model.costs > 1)
    for i, s, a in zip(*np.nonzero(bad_cost)):
        out.append(Violation("costs", (int(i), int(s), int(a)), f"cost {model.costs[i, s, a]!r} outside [0, 1]"))
    tau = model.thresholds
    for i in np.flatnonzero(~np.isfinite(tau) | (tau < 0) | (tau > 1)):
        out.append(Violation("thresholds", (int(i),), f"threshold {tau[i]!r} outside [0, 1]"))
    if not 0 <= model.initial_state < S:
        out.append(Violation("initial_state", (model.initial_state,), f"not a state index in [0, {S})"))
    return out


def require_valid(model: Cmdp) -> Cmdp:
    violations = validate(model)
    if violations:
        raise InvalidModelError("invalid CMDP", violations)
    return model


def _check_shapes(model: Cmdp, policy: StationaryPolicy) -> None:
    if policy.probs.shape != (model.n_states, model.n_actions):
        raise InvalidModelError(
            f"policy shape {policy.probs.shape} does not match model ({model.n_states}, {model.n_actions})"
        )


def induced_chain(model: Cmdp, policy: StationaryPolicy) -> FloatArray:
    _check_shapes(model, policy)
    return np.einsum("sa,sat->st", policy.probs, model.transitions)


def policy_costs(model: Cmdp, policy: StationaryPolicy) -> FloatArray:
    """Expected one-step cost per state, shape (m + 1, S)."""
    _check_shapes(model, policy)
    return np.einsum("sa,isa->is", policy.probs, model.costs)


def stationary_distribution(chain: FloatArray) -> Optional[FloatArray]:
    """
    Solve q^T P = q^T, sum(q) = 1 with the normalization row appended.

    Returns None when the system is rank deficient, i.e. the chain has more than
    one recurrent class.
    """
    n = chain.shape[0]
    # The lazy chain (P + I) / 2 is aperiodic and has the same stationary distribution.
    lazy = 0.5 * (chain + np.eye(n))
    system = np.vstack([lazy.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    q, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    if rank < n:
        return None
    q = np.clip(q, 0.0, None)
    return q / q.sum()


def _cesaro_row(chain: FloatArray, start: int) -> FloatArray:
    """Row `start` of the Cesaro limit, via repeated squaring of the lazy chain."""
    n = chain.shape[0]
    power = 0.5 * (chain + np.eye(n))
    for _ in range(64):
        nxt = power @ power
        if np.max(np.abs(nxt - power)) < 1e-14:
            power = nxt
            break
        power = nxt
    row = np.clip(power[start], 0.0, None)
    return row / row.sum()


def _solve_bias(chain: FloatArray, gaps: FloatArray, pin: int) -> FloatArray:
    """Solve (I - P) v = gaps with v[pin] = 0, pin being a recurrent state."""
    n = chain.shape[0]
    system = np.eye(n) - chain
    system[pin, :] = 0.0
    system[pin, pin] = 1.0
    rhs = gaps.T.copy()
    rhs[pin, :] = 0.0
    return linalg.solve(system, rhs).T


def evaluate_policy(model: Cmdp, policy: StationaryPolicy, *, cesaro_fallback: bool = False) -> PolicyEvaluation:
    """
    Average loss, min-normalized bias and stationary distribution of a stationary policy.

    Raises NonUnichainError when the induced chain has several recurrent classes, unless
    cesaro_fallback is set; the fallback reports the Cesaro loss seen from the initial
    state and a least-squares bias.
    """
    chain = induced_chain(model, policy)
    costs = policy_costs(model, policy)
    q = stationary_distribution(chain)
    n = model.n_states
    if q is not None:
        loss = costs @ q
        bias = _solve_bias(chain, costs - loss[:, None], int(np.argmax(q)))
    elif cesaro_fallback:
        logger.warning("induced chain is not unichain; using Cesaro limit from state %d", model.initial_state)
        q = _cesaro_row(chain, model.initial_state)
        loss = costs @ q
        bias = np.linalg.lstsq(np.eye(n) - chain, (costs - loss[:, None]).T, rcond=None)[0].T
    else:
        raise NonUnichainError("induced chain has more than one recurrent class")
    bias = bias - bias.min(axis=1, keepdims=True)
    return PolicyEvaluation(loss=frozen_array(loss), bias=frozen_array(bias), stationary_dist=frozen_array(q))


def bellman_residual(model: Cmdp, policy: StationaryPolicy, evaluation: PolicyEvaluation) -> float:
    """max over components and states of |J + v(s) - sum_a pi(a|s)[c(s,a) + sum_s' p(s'|s,a) v(s')]|."""
    chain = induced_chain(model, policy)
    costs = policy_costs(model, policy)
    lhs = evaluation.loss[:, None] + evaluation.bias
    rhs = costs + evaluation.bias @ chain.T
    return float(np.max(np.abs(lhs - rhs)))


def _is_primitive(chain: FloatArray) -> bool:
    """Irreducible and aperiodic iff P^k > 0 entrywise for k = (n - 1)^2 + 1 (Wielandt)."""
    n = chain.shape[0]
    support = (chain > 0).astype(np.int64)
    k = (n - 1) ** 2 + 1
    result = np.eye(n, dtype=np.int64)
    base = support
    while k:
        if k & 1:
            result = (result @ base > 0).astype(np.int64)
        base = (base @ base > 0).astype(np.int64)
        k >>= 1
    return bool(result.all())


def loss_perturbation_gap(
    model_a: Cmdp, model_b: Cmdp, policy: StationaryPolicy, component: int
) -> tuple[float, float]:
    """
    Gap J(c_i; p_b) - J(c_i; p_a) and its bound ||v(c_i; p_a)||_inf * max_{s,a} ||p_b - p_a||_1.
    """
    if model_a.transitions.shape != model_b.transitions.shape or not np.array_equal(model_a.costs, model_b.costs):
        raise InvalidModelError("models must share state/action spaces and costs")
    for label, model in (("model_a", model_a), ("model_b", model_b)):
        if not _is_primitive(induced_chain(model, policy)):
            raise NonUnichainError(f"{label}: induced chain is not irreducible and aperiodic")
    eval_a = evaluate_policy(model_a, policy)
    eval_b = evaluate_policy(model_b, policy)
    gap = float(eval_b.loss[component] - eval_a.loss[component])
    distance = float(np.abs(model_b.transitions - model_a.transitions).sum(axis=2).max())
    bound = float(np.abs(eval_a.bias[component]).max()) * distance
    return gap, bound


def _reachability(chain: FloatArray) -> NDArray[np.bool_]:
    n = chain.shape[0]
    reach = (chain > 0) | np.eye(n, dtype=bool)
    while True:
        nxt = (reach.astype(np.int64) @ reach.astype(np.int64)) > 0
        if np.array_equal(nxt, reach):
            return reach
        reach = nxt


def estimate_hitting_time(model: Cmdp, policy: StationaryPolicy) -> float:
    """
    Max over ordered pairs (s, s') of the expected first-passage time from s to s'.

    Infinite when some state cannot reach another (e.g. transient states exist).
    """
    chain = induced_chain(model, policy)
    if stationary_distribution(chain) is None:
        raise NonUnichainError("induced chain has more than one recurrent class")
    n = chain.shape[0]
    if n == 1:
        return 0.0
    if not _reachability(chain).all():
        return math.inf
    worst = 0.0
    for target in range(n):
        others = np.arange(n) != target
        sub = chain[np.ix_(others, others)]
        hits = linalg.solve(np.eye(n - 1) - sub, np.ones(n - 1))
        worst = max(worst, float(hits.max()))
    return worst


def estimate_cover_time_bound(model: Cmdp, policy: StationaryPolicy) -> float:
    """Matthews-type bound: hitting time times the harmonic number H_{S-1}."""
    hit = estimate_hitting_time(model, policy)
    n = model.n_states
    if n == 1:
        return 0.0
    return hit * sum(1.0 / k for k in range(1, n))


def diagnose(model: Cmdp, policy: StationaryPolicy, hitting_time_bound: Optional[float] = None) -> Diagnostics:
    evaluation = evaluate_policy(model, policy)
    components = range(1, model.n_constraints + 1) if model.n_constraints else range(1)
    span = max(evaluation.span(i) for i in components)
    hit = estimate_hitting_time(model, policy)
    cover = estimate_cover_time_bound(model, policy)
    diag = Diagnostics(
        span=span,
        hitting_time_estimate=hit,
        cover_time_bound=cover,
        hitting_time_bound=hitting_time_bound,
    )
    if diag.within_bound is False:
        logger.warning("hitting time estimate %.3f exceeds the configured bound H=%.3f", hit, hitting_time_bound)
    return diag
