from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar, Literal, Optional

import numpy as np
from numpy.typing import ArrayLike

from .cmdp import Cmdp, FloatArray, StationaryPolicy, frozen_array
from .errors import PlanningError
from .planner import (
    DEFAULT_BACKEND,
    ConfidenceSet,
    LpBackend,
    PlanOutcome,
    confidence_radius,
    policy_from_occupancy,
    solve_cmdp_lp,
    solve_extended_lp,
)
from .posterior import DEFAULT_PRIOR_ALPHA, DirichletPosterior, IntArray

logger = logging.getLogger(__name__)

StopReason = Literal["doubling", "length", "schedule"]


@dataclass(frozen=True)
class EpisodeRecord:
    index: int
    start: int
    length: int
    stop_reason: StopReason
    fallback: bool


@dataclass(frozen=True)
class AgentPlan:
    policy: StationaryPolicy
    outcome: PlanOutcome

    @property
    def fallback(self) -> bool:
        return self.outcome.status == "Infeasible"


def plan_or_uniform(outcome: PlanOutcome, n_states: int, n_actions: int) -> AgentPlan:
    """LP policy when Optimal, uniform pi_0 when Infeasible; numerical failures abort."""
    if outcome.status == "Optimal" and outcome.occupancy is not None:
        return AgentPlan(policy_from_occupancy(outcome.occupancy), outcome)
    if outcome.status == "Infeasible":
        return AgentPlan(StationaryPolicy.uniform(n_states, n_actions), outcome)
    logger.error("planner failed: %s", outcome.message)
    raise PlanningError(f"planner failed: {outcome.message}", outcome)


class Agent(ABC):
    """
    Common interface: step(s) emits an action, observe(...) feeds the transition back.

    Time t is 1-indexed and counts the round about to be played.
    """

    name: ClassVar[str]

    def __init__(self, n_states: int, n_actions: int, n_costs: int, rng: np.random.Generator) -> None:
        self.n_states = n_states
        self.n_actions = n_actions
        self.rng = rng
        self.t = 1
        self.episode_index = 0
        self.episode_start = 0
        self.fallback_active = False
        self.episodes: list[EpisodeRecord] = []
        self.cost_sums = np.zeros((n_costs, n_states, n_actions))
        self._set_policy(StationaryPolicy.uniform(n_states, n_actions))

    @property
    @abstractmethod
    def transition_counts(self) -> IntArray: ...

    @property
    def visits(self) -> IntArray:
        return self.transition_counts.sum(axis=2)

    def _set_policy(self, policy: StationaryPolicy, fallback: bool = False) -> None:
        self.policy = policy
        self.fallback_active = fallback
        cum = np.cumsum(policy.probs, axis=1)
        cum[:, -1] = 1.0
        self._cumulative = cum

    def _open_episode(self) -> None:
        self.episode_index += 1
        self.episode_start = self.t

    def _close_episode(self, reason: StopReason) -> None:
        record = EpisodeRecord(
            index=self.episode_index,
            start=self.episode_start,
            length=self.t - self.episode_start,
            stop_reason=reason,
            fallback=self.fallback_active,
        )
        self.episodes.append(record)
        logger.debug("%s episode %d ended at t=%d (%s, length %d)", self.name, record.index, self.t, reason, record.length)

    def step(self, state: int) -> int:
        action = int(np.searchsorted(self._cumulative[state], self.rng.random(), side="right"))
        return min(action, self.n_actions - 1)

    def observe(self, state: int, action: int, costs: ArrayLike, next_state: int) -> None:
        self._record(state, action, next_state)
        self.cost_sums[:, state, action] += np.asarray(costs, dtype=np.float64)
        self.t += 1
        self._after_observe(state, action)

    @abstractmethod
    def _record(self, state: int, action: int, next_state: int) -> None: ...

    def _after_observe(self, state: int, action: int) -> None:
        pass


class _TallyAgent(Agent):
    def __init__(self, n_states: int, n_actions: int, n_costs: int, rng: np.random.Generator) -> None:
        self._counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
        self._visits = np.zeros((n_states, n_actions), dtype=np.int64)
        super().__init__(n_states, n_actions, n_costs, rng)

    @property
    def transition_counts(self) -> IntArray:
        return self._counts

    @property
    def visits(self) -> IntArray:
        return self._visits

    def _record(self, state: int, action: int, next_state: int) -> None:
        self._counts[state, action, next_state] += 1
        self._visits[state, action] += 1


class FixedPolicyAgent(_TallyAgent):
    """Executes one stationary policy forever (oracle and uniform reference agents)."""

    name = "fixed"

    def __init__(self, policy: StationaryPolicy, n_costs: int, rng: np.random.Generator, name: str = "fixed") -> None:
        super().__init__(policy.n_states, policy.n_actions, n_costs, rng)
        self.name = name
        self._set_policy(policy)
        self._open_episode()


# --------------------------------------------------------------------------------------
# Posterior sampling


@dataclass(frozen=True)
class PSConRLState:
    """Snapshot of the posterior-sampling agent's episode bookkeeping."""

    posterior: DirichletPosterior
    current_policy: StationaryPolicy
    episode_index: int
    episode_start: int
    prev_episode_length: int
    visit_snapshot: IntArray
    fallback_active: bool


def psconrl_stop_reason(state: PSConRLState, t: int, visits: ArrayLike) -> Optional[StopReason]:
    """
    Doubling: some N_t(s,a) >= 2 max(1, N_{t_k}(s,a)).
    Length: t - t_k >= T_{k-1} + 1.
    """
    counts = np.asarray(visits)
    if np.any(counts >= 2 * np.maximum(1, state.visit_snapshot)):
        return "doubling"
    if t - state.episode_start >= state.prev_episode_length + 1:
        return "length"
    return None


def psconrl_should_stop(state: PSConRLState, t: int, visits: ArrayLike) -> bool:
    return psconrl_stop_reason(state, t, visits) is not None


class PSConRLAgent(Agent):
    """
    Posterior sampling for constrained RL with known costs.

    Each episode samples a kernel from the Dirichlet posterior, solves the occupancy LP
    for it and follows the extracted policy; an infeasible sample falls back to the
    uniform policy for the whole episode.
    """

    name = "psconrl"

    def __init__(
        self,
        costs: ArrayLike,
        thresholds: ArrayLike,
        rng: np.random.Generator,
        prior_alpha: ArrayLike = DEFAULT_PRIOR_ALPHA,
        initial_state: int = 0,
        backend: LpBackend = DEFAULT_BACKEND,
    ) -> None:
        self.costs = frozen_array(costs)
        self.thresholds = frozen_array(thresholds).reshape(-1)
        n_costs, n_states, n_actions = self.costs.shape
        self.initial_state = initial_state
        self.backend = backend
        self.posterior = DirichletPosterior(n_states, n_actions, prior_alpha)
        self.prev_episode_length = 0
        self.visit_snapshot = np.zeros((n_states, n_actions), dtype=np.int64)
        self.last_outcome: Optional[PlanOutcome] = None
        super().__init__(n_states, n_actions, n_costs, rng)
        self.begin_episode()

    @property
    def transition_counts(self) -> IntArray:
        return self.posterior.counts

    @property
    def visits(self) -> IntArray:
        return self.posterior.visits

    @property
    def state(self) -> PSConRLState:
        return PSConRLState(
            posterior=self.posterior,
            current_policy=self.policy,
            episode_index=self.episode_index,
            episode_start=self.episode_start,
            prev_episode_length=self.prev_episode_length,
            visit_snapshot=self.visit_snapshot.copy(),
            fallback_active=self.fallback_active,
        )

    def begin_episode(self) -> None:
        self.prev_episode_length = self.t - self.episode_start
        self._open_episode()
        self.visit_snapshot = self.posterior.visits.copy()
        kernel = self.posterior.sample_kernel(self.rng)
        sampled = Cmdp(kernel, self.costs, self.thresholds, self.initial_state)
        plan = plan_or_uniform(solve_cmdp_lp(sampled, self.backend), self.n_states, self.n_actions)
        self.last_outcome = plan.outcome
        self._set_policy(plan.policy, plan.fallback)
        if plan.fallback:
            logger.debug("episode %d: sampled model infeasible, following the uniform policy", self.episode_index)

    def _record(self, state: int, action: int, next_state: int) -> None:
        self.posterior.update(state, action, next_state)

    def _after_observe(self, state: int, action: int) -> None:
        # Only the pair just visited can have doubled.
        reason: Optional[StopReason] = None
        if self.posterior.visits[state, action] >= 2 * max(1, int(self.visit_snapshot[state, action])):
            reason = "doubling"
        elif self.t - self.episode_start >= self.prev_episode_length + 1:
            reason = "length"
        if reason is not None:
            self._close_episode(reason)
            self.begin_episode()


# --------------------------------------------------------------------------------------
# Optimistic baselines


@dataclass(frozen=True)
class BaselineEstimates:
    rewards: FloatArray  # (S, A), r = 1 - c0
    costs: FloatArray  # (m + 1, S, A)
    kernel: FloatArray  # (S, A, S)
    bonus: FloatArray  # (S, A)

    @classmethod
    def from_counts(
        cls,
        transition_counts: ArrayLike,
        cost_sums: ArrayLike,
        t: int,
        delta: float,
        bonus_scale: float = 1.0,
    ) -> "BaselineEstimates":
        counts = np.asarray(transition_counts, dtype=np.float64)
        sums = np.asarray(cost_sums, dtype=np.float64)
        n_states, n_actions, _ = counts.shape
        visits = counts.sum(axis=2)
        denom = np.maximum(visits, 1.0)
        mean_costs = sums / denom
        kernel = np.where(visits[:, :, None] > 0, counts / denom[:, :, None], 1.0 / n_states)
        bonus = bonus_scale * confidence_radius(visits, max(t, 1), delta, n_states, n_actions)
        return cls(rewards=1.0 - mean_costs[0], costs=mean_costs, kernel=kernel, bonus=bonus)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]


def _optimistic_plan(est: BaselineEstimates, aux: FloatArray, thresholds: ArrayLike, backend: LpBackend) -> AgentPlan:
    reward = np.clip(est.rewards + est.bonus, 0.0, 1.0)
    costs = np.concatenate([(1.0 - reward)[None], aux])
    model = Cmdp(est.kernel, costs, thresholds)
    return plan_or_uniform(solve_cmdp_lp(model, backend), est.n_states, est.n_actions)


def conrl_plan(est: BaselineEstimates, thresholds: ArrayLike, backend: LpBackend = DEFAULT_BACKEND) -> AgentPlan:
    """Optimistic in rewards and in constraint costs."""
    aux = np.clip(est.costs[1:] - est.bonus, 0.0, 1.0)
    return _optimistic_plan(est, aux, thresholds, backend)


def cucrl_plan(est: BaselineEstimates, thresholds: ArrayLike, backend: LpBackend = DEFAULT_BACKEND) -> AgentPlan:
    """Optimistic in rewards, pessimistic in constraint costs."""
    aux = np.clip(est.costs[1:] + est.bonus, 0.0, 1.0)
    return _optimistic_plan(est, aux, thresholds, backend)


def ucrlcmdp_plan(
    est: BaselineEstimates,
    thresholds: ArrayLike,
    t: int,
    delta: float,
    visits: ArrayLike,
    bonus_scale: float = 1.0,
    backend: LpBackend = DEFAULT_BACKEND,
) -> AgentPlan:
    """Joint optimism over occupancy and kernels in the L1 confidence set around p_bar."""
    radii = bonus_scale * confidence_radius(visits, max(t, 1), delta, est.n_states, est.n_actions)
    conf_set = ConfidenceSet(center=est.kernel, radii=np.broadcast_to(radii, est.kernel.shape[:2]))
    outcome = solve_extended_lp(conf_set, est.costs, thresholds, backend)
    return plan_or_uniform(outcome, est.n_states, est.n_actions)


class _BaselineAgent(_TallyAgent):
    def __init__(
        self,
        n_states: int,
        n_actions: int,
        thresholds: ArrayLike,
        rng: np.random.Generator,
        delta: float,
        bonus_scale: float = 1.0,
        backend: LpBackend = DEFAULT_BACKEND,
    ) -> None:
        self.thresholds = frozen_array(thresholds).reshape(-1)
        self.delta = delta
        self.bonus_scale = bonus_scale
        self.backend = backend
        self.last_outcome: Optional[PlanOutcome] = None
        super().__init__(n_states, n_actions, self.thresholds.shape[0] + 1, rng)

    def estimates(self) -> BaselineEstimates:
        return BaselineEstimates.from_counts(self._counts, self.cost_sums, self.t, self.delta, self.bonus_scale)

    def _apply(self, plan: AgentPlan) -> None:
        self.last_outcome = plan.outcome
        self._set_policy(plan.policy, plan.fallback)


class ConRLAgent(_BaselineAgent):
    """Bonus-optimistic LP replanned at doubling epochs."""

    name = "conrl"

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        thresholds: ArrayLike,
        rng: np.random.Generator,
        delta: float,
        bonus_scale: float = 1.0,
        backend: LpBackend = DEFAULT_BACKEND,
    ) -> None:
        super().__init__(n_states, n_actions, thresholds, rng, delta, bonus_scale, backend)
        self._begin_epoch()

    def _begin_epoch(self) -> None:
        self._open_episode()
        self.visit_snapshot = self._visits.copy()
        self._apply(conrl_plan(self.estimates(), self.thresholds, self.backend))

    def _after_observe(self, state: int, action: int) -> None:
        snapshot = int(self.visit_snapshot[state, action])
        if self._visits[state, action] - snapshot >= max(1, snapshot):
            self._close_episode("doubling")
            self._begin_epoch()


class CUCRLAgent(_BaselineAgent):
    """
    Episode k lasts k*h rounds: h rounds of the uniform policy, then (k-1)*h rounds of
    the plan against pessimistic constraint costs.
    """

    name = "cucrl"

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        thresholds: ArrayLike,
        rng: np.random.Generator,
        delta: float,
        bonus_scale: float = 1.0,
        backend: LpBackend = DEFAULT_BACKEND,
        h: int = 100,
    ) -> None:
        self.h = h
        super().__init__(n_states, n_actions, thresholds, rng, delta, bonus_scale, backend)
        self._open_episode()

    def _after_observe(self, state: int, action: int) -> None:
        elapsed = self.t - self.episode_start
        if elapsed >= self.episode_index * self.h:
            self._close_episode("schedule")
            self._open_episode()
            self._set_policy(StationaryPolicy.uniform(self.n_states, self.n_actions))
        elif elapsed == self.h:
            self._apply(cucrl_plan(self.estimates(), self.thresholds, self.backend))


class UCRLCMDPAgent(_BaselineAgent):
    """Extended-LP planning over episodes of fixed length ceil(T^alpha)."""

    name = "ucrlcmdp"

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        thresholds: ArrayLike,
        rng: np.random.Generator,
        delta: float,
        bonus_scale: float = 1.0,
        backend: LpBackend = DEFAULT_BACKEND,
        *,
        horizon: int,
        alpha: float = 0.5,
    ) -> None:
        self.episode_length = episode_length(horizon, alpha)
        super().__init__(n_states, n_actions, thresholds, rng, delta, bonus_scale, backend)
        self._begin_episode()

    def _begin_episode(self) -> None:
        self._open_episode()
        plan = ucrlcmdp_plan(
            self.estimates(),
            self.thresholds,
            self.t,
            self.delta,
            self._visits,
            self.bonus_scale,
            self.backend,
        )
        self._apply(plan)

    def _after_observe(self, state: int, action: int) -> None:
        if self.t - self.episode_start >= self.episode_length:
            self._close_episode("schedule")
            self._begin_episode()


def episode_length(horizon: int, alpha: float) -> int:
    return max(1, math.ceil(max(horizon, 1) ** alpha))
