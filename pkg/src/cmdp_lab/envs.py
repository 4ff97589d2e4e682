from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .cmdp import Cmdp, FloatArray, StationaryPolicy, require_valid
from .errors import GridSpecError, InfeasibleError, PlanningError
from .models import Cell, GridSpec
from .planner import policy_from_occupancy, solve_cmdp_lp

logger = logging.getLogger(__name__)

ACTIONS = ("up", "down", "right", "left")
_MOVES: tuple[Cell, ...] = ((-1, 0), (1, 0), (0, 1), (0, -1))
# Slip directions for each intended action.
_PERPENDICULAR: tuple[tuple[int, int], ...] = ((2, 3), (2, 3), (0, 1), (0, 1))


@dataclass(frozen=True)
class EnvState:
    agent: Cell
    box: Optional[Cell] = None


def initial_state(spec: GridSpec) -> EnvState:
    return EnvState(spec.start, spec.box_start)


def _is_open(spec: GridSpec, cell: Cell) -> bool:
    return spec.in_bounds(cell) and cell not in spec.walls


def is_corner(spec: GridSpec, cell: Cell) -> bool:
    """A cell adjacent to at least two walls (grid boundary counts as wall)."""
    blocked = sum(not _is_open(spec, (cell[0] + dr, cell[1] + dc)) for dr, dc in _MOVES)
    return blocked >= 2


def _shift(cell: Cell, direction: int) -> Cell:
    dr, dc = _MOVES[direction]
    return (cell[0] + dr, cell[1] + dc)


def _move(spec: GridSpec, state: EnvState, direction: int) -> EnvState:
    target = _shift(state.agent, direction)
    if not _is_open(spec, target):
        return state
    if state.box is not None and target == state.box:
        beyond = _shift(target, direction)
        # The goal tile is kept free so the goal stays reachable.
        if not _is_open(spec, beyond) or beyond == spec.goal:
            return state
        return EnvState(target, beyond)
    return EnvState(target, state.box)


def outcomes(spec: GridSpec, state: EnvState, action: int) -> list[tuple[EnvState, float]]:
    """Successor distribution of one step; probabilities of equal successors are merged."""
    if state.agent == spec.goal:
        return [(initial_state(spec), 1.0)]
    eps = spec.slip
    left, right = _PERPENDICULAR[action]
    merged: dict[EnvState, float] = {}
    for direction, prob in ((action, 1.0 - eps), (left, eps / 2), (right, eps / 2)):
        if prob <= 0.0:
            continue
        nxt = _move(spec, state, direction)
        merged[nxt] = merged.get(nxt, 0.0) + prob
    return list(merged.items())


def state_costs(spec: GridSpec, state: EnvState) -> tuple[float, float]:
    """(c0, c1) incurred by any action taken in `state`."""
    main = 0.0 if state.agent == spec.goal else 1.0
    if spec.variant == "marsrover":
        aux = 1.0 if state.agent in spec.risky else 0.0
    else:
        assert state.box is not None
        aux = 1.0 if is_corner(spec, state.box) else 0.0
    return main, aux


@dataclass(frozen=True)
class CompiledGrid:
    spec: GridSpec
    model: Cmdp
    states: tuple[EnvState, ...]

    @cached_property
    def index(self) -> dict[EnvState, int]:
        return {state: i for i, state in enumerate(self.states)}

    def state_index(self, state: EnvState) -> int:
        return self.index[state]

    def cell_policy(self, actions_by_cell: dict[Cell, int], default: int = 0) -> StationaryPolicy:
        """Deterministic policy choosing by agent cell only."""
        acts = [actions_by_cell.get(state.agent, default) for state in self.states]
        return StationaryPolicy.deterministic(acts, len(ACTIONS))


def _reachable_states(spec: GridSpec) -> tuple[EnvState, ...]:
    start = initial_state(spec)
    seen = {start}
    order = [start]
    queue = deque([start])
    while queue:
        state = queue.popleft()
        for action in range(len(ACTIONS)):
            # Every direction is the intended move of some action, so slip adds nothing new.
            nxt = initial_state(spec) if state.agent == spec.goal else _move(spec, state, action)
            if nxt not in seen:
                seen.add(nxt)
                order.append(nxt)
                queue.append(nxt)
    return tuple(order)


def compile_grid(spec: GridSpec) -> CompiledGrid:
    states = _reachable_states(spec)
    if not any(state.agent == spec.goal for state in states):
        raise GridSpecError(f"goal {spec.goal} is not reachable from start {spec.start}")
    index = {state: i for i, state in enumerate(states)}
    S, A = len(states), len(ACTIONS)
    transitions = np.zeros((S, A, S))
    costs = np.zeros((2, S, A))
    for i, state in enumerate(states):
        costs[:, i, :] = np.asarray(state_costs(spec, state))[:, None]
        for action in range(A):
            for nxt, prob in outcomes(spec, state, action):
                transitions[i, action, index[nxt]] += prob
    model = require_valid(Cmdp(transitions, costs, [spec.threshold], initial_state=0))
    logger.debug("compiled %s layout %r: %d states", spec.variant, spec.name, S)
    return CompiledGrid(spec=spec, model=model, states=states)


def compile_spec(spec: GridSpec) -> Cmdp:
    return compile_grid(spec).model


def env_step(spec: GridSpec, state: EnvState, action: int, rng: np.random.Generator) -> tuple[EnvState, tuple[float, float]]:
    """Sample one transition; costs are those of the state the action is taken in."""
    costs = state_costs(spec, state)
    if state.agent == spec.goal:
        return initial_state(spec), costs
    u = rng.random()
    eps = spec.slip
    left, right = _PERPENDICULAR[action]
    if u < 1.0 - eps:
        direction = action
    elif u < 1.0 - eps / 2:
        direction = left
    else:
        direction = right
    return _move(spec, state, direction), costs


class GridEnv:
    """Simulator over flat state indices of a compiled grid."""

    def __init__(self, grid: CompiledGrid) -> None:
        self.grid = grid
        self.state = initial_state(grid.spec)

    def reset(self) -> int:
        self.state = initial_state(self.grid.spec)
        return self.grid.state_index(self.state)

    def step(self, action: int, rng: np.random.Generator) -> tuple[int, FloatArray]:
        self.state, costs = env_step(self.grid.spec, self.state, action, rng)
        return self.grid.state_index(self.state), np.asarray(costs)


def solve_reference(model: Cmdp, label: str = "model") -> tuple[float, StationaryPolicy]:
    outcome = solve_cmdp_lp(model)
    if outcome.status == "Infeasible":
        raise InfeasibleError(f"{label}: no stationary policy meets the thresholds ({outcome.message})")
    if outcome.status != "Optimal" or outcome.occupancy is None or outcome.objective is None:
        raise PlanningError(f"{label}: planner failed: {outcome.message}", outcome)
    return outcome.objective, policy_from_occupancy(outcome.occupancy)


def oracle_solution(spec: GridSpec) -> tuple[float, StationaryPolicy]:
    """Optimal constrained loss J* and an optimal policy of the compiled layout."""
    return solve_reference(compile_spec(spec), spec.name or spec.variant)


def unconstrained_solution(spec: GridSpec) -> tuple[float, StationaryPolicy]:
    model = compile_spec(spec)
    return solve_reference(model.with_thresholds(np.ones(model.n_constraints)), spec.name or spec.variant)
