from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import pytest
from scipy.optimize import OptimizeResult, linprog

from cmdp_lab.cmdp import Cmdp, StationaryPolicy, evaluate_policy
from cmdp_lab.errors import InvalidModelError
from cmdp_lab.planner import (
    DEFAULT_BACKEND,
    FEASIBILITY_TOL,
    ConfidenceSet,
    HighsBackend,
    LinearProgram,
    LpSolution,
    OccupancyMeasure,
    PlanOutcome,
    confidence_radius,
    phase_one,
    policy_from_occupancy,
    slater_margin,
    solve_cmdp_lp,
    solve_extended_lp,
)

from conftest import RandomCmdp, make_random_cmdp

GRID = np.round(np.arange(0.0, 1.0 + 1e-9, 0.05), 10)


def grid_search(model: Cmdp) -> float:
    """Minimum loss over randomized policies pi(0|s) on a 0.05 grid, constraints respected."""
    S = model.n_states
    first = np.array(list(itertools.product(GRID, repeat=S)))  # (N, S)
    probs = np.stack([first, 1.0 - first], axis=2)  # (N, S, 2)
    chains = np.einsum("nsa,sat->nst", probs, model.transitions)
    system = np.transpose(chains, (0, 2, 1)) - np.eye(S)
    system[:, -1, :] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    q = np.linalg.solve(system, np.broadcast_to(rhs, (len(first), S))[..., None])[..., 0]
    costs = np.einsum("nsa,isa->nis", probs, model.costs)
    loss = np.einsum("nis,ns->ni", costs, q)
    feasible = np.all(loss[:, 1:] <= model.thresholds + 1e-12, axis=1)
    return float(loss[feasible, 0].min()) if feasible.any() else math.inf


def lp_oracle_check(rng: np.random.Generator, n_instances: int) -> None:
    checked = 0
    while checked < n_instances:
        model = make_random_cmdp(rng, n_states=3, n_actions=2, n_constraints=1)
        outcome = solve_cmdp_lp(model)
        if outcome.status == "Infeasible":
            continue
        assert outcome.status == "Optimal", outcome.message
        assert outcome.occupancy is not None and outcome.objective is not None
        assert outcome.objective <= grid_search(model) + 1e-6
        ev = evaluate_policy(model, policy_from_occupancy(outcome.occupancy))
        assert ev.loss[0] == pytest.approx(outcome.objective, abs=1e-6)
        assert np.all(ev.loss[1:] <= model.thresholds + 1e-6)
        checked += 1


def test_lp_matches_grid_search_oracle() -> None:
    lp_oracle_check(np.random.default_rng(11), 40)


@pytest.mark.slow
def test_lp_matches_grid_search_oracle_full() -> None:
    lp_oracle_check(np.random.default_rng(12), 200)


def test_two_state_optimum(two_state_cmdp: Cmdp) -> None:
    outcome = solve_cmdp_lp(two_state_cmdp)
    assert outcome.ok
    assert outcome.objective == pytest.approx(0.5, abs=1e-7)
    assert outcome.reward == pytest.approx(0.5, abs=1e-7)
    assert outcome.occupancy is not None
    mu = outcome.occupancy.mu
    assert mu.sum() == pytest.approx(1.0)
    assert float(np.sum(mu * two_state_cmdp.costs[1])) <= 0.5 + 1e-7
    assert outcome.occupancy.state_marginal() == pytest.approx([0.5, 0.5], abs=1e-7)


def test_unconstrained_model(random_cmdp: RandomCmdp) -> None:
    model = random_cmdp(n_constraints=0)
    outcome = solve_cmdp_lp(model)
    assert outcome.ok
    # An unconstrained optimum is attained by a deterministic policy.
    best = min(
        evaluate_policy(model, StationaryPolicy.deterministic(acts, 2)).loss[0]
        for acts in itertools.product(range(2), repeat=3)
    )
    assert outcome.objective == pytest.approx(best, abs=1e-7)


def test_forced_infeasibility_is_certified(random_cmdp: RandomCmdp) -> None:
    model = random_cmdp()
    costs = model.costs.copy()
    costs[1] = 0.1 + 0.9 * costs[1]
    outcome = solve_cmdp_lp(Cmdp(model.transitions, costs, [0.0]))
    assert outcome.status == "Infeasible"
    assert outcome.occupancy is None
    assert outcome.phase_one is not None and outcome.phase_one > FEASIBILITY_TOL


def test_outcome_requires_occupancy_iff_optimal() -> None:
    with pytest.raises(ValueError):
        PlanOutcome("Optimal")
    with pytest.raises(ValueError):
        PlanOutcome("Infeasible", occupancy=OccupancyMeasure(np.full((1, 1), 1.0)))


def test_policy_from_occupancy_zero_mass_rows_are_uniform() -> None:
    mu = OccupancyMeasure(np.array([[0.3, 0.1, 0.0], [0.0, 0.0, 0.0], [0.0, 0.6, 0.0]]))
    policy = policy_from_occupancy(mu)
    assert policy.probs[0] == pytest.approx([0.75, 0.25, 0.0])
    assert policy.probs[1] == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    assert policy.probs[2] == pytest.approx([0.0, 1.0, 0.0])


@dataclass
class ScriptedBackend:
    """Returns scripted statuses first, then defers to the real solver."""

    script: list[LpSolution]

    def solve(self, program: LinearProgram) -> LpSolution:
        if self.script:
            return self.script.pop(0)
        return DEFAULT_BACKEND.solve(program)


def test_solver_breakdown_is_numerical_failure(random_cmdp: RandomCmdp) -> None:
    backend = ScriptedBackend([LpSolution("NumericalFailure", message="iteration limit")])
    outcome = solve_cmdp_lp(random_cmdp(), backend)
    assert outcome.status == "NumericalFailure"
    assert "iteration limit" in outcome.message


def test_uncertified_infeasibility_is_numerical_failure(two_state_cmdp: Cmdp) -> None:
    # The solver claims infeasible but phase one finds a feasible point.
    backend = ScriptedBackend([LpSolution("Infeasible", message="claimed")])
    outcome = solve_cmdp_lp(two_state_cmdp, backend)
    assert outcome.status == "NumericalFailure"
    assert outcome.phase_one == pytest.approx(0.0, abs=1e-9)


def test_highs_default_options_are_the_last_resort(two_state_cmdp: Cmdp, monkeypatch: pytest.MonkeyPatch) -> None:
    calls: list[tuple[str, dict[str, object]]] = []

    def flaky_linprog(*args: object, method: str, options: dict[str, object], **kwargs: object) -> OptimizeResult:
        calls.append((method, dict(options)))
        if method != "highs":
            return OptimizeResult(status=4, message="numerical difficulties", x=None, fun=None)
        return linprog(*args, method=method, options=options, **kwargs)

    monkeypatch.setattr("cmdp_lab.planner.linprog", flaky_linprog)
    outcome = solve_cmdp_lp(two_state_cmdp, HighsBackend())
    assert outcome.status == "Optimal"
    assert outcome.objective == pytest.approx(0.5, abs=1e-7)
    assert [method for method, _ in calls] == ["highs-ds", "highs-ipm", "highs"]
    assert calls[0][1]["primal_feasibility_tolerance"] == FEASIBILITY_TOL
    assert calls[-1][1] == {}


def test_phase_one_of_feasible_program_is_zero() -> None:
    program = LinearProgram(
        objective=np.zeros(2),
        a_eq=None,
        b_eq=None,
        a_ub=None,
        b_ub=None,
        bounds=[(0.0, 1.0), (0.0, 1.0)],
    )
    assert phase_one(program) == pytest.approx(0.0)


def test_confidence_radius_formula() -> None:
    value = confidence_radius(4, t=100, delta=0.01, n_states=5, n_actions=2)
    assert float(value) == pytest.approx(math.sqrt(14 * 5 * math.log(2 * 2 * 100 / 0.01) / 4))
    radii = confidence_radius(np.arange(0, 50), t=100, delta=0.01, n_states=5, n_actions=2)
    assert radii[0] == radii[1]
    assert np.all(np.diff(radii) <= 0)
    assert np.all(radii >= 0)


def test_extended_lp_with_zero_radius_matches_plain_lp(random_cmdp: RandomCmdp) -> None:
    for _ in range(10):
        model = random_cmdp()
        plain = solve_cmdp_lp(model)
        if not plain.ok:
            continue
        conf = ConfidenceSet(model.transitions, np.zeros((3, 2)))
        ext = solve_extended_lp(conf, model.costs, model.thresholds)
        assert ext.ok, ext.message
        assert ext.objective == pytest.approx(plain.objective, abs=1e-6)


def test_extended_lp_is_optimistic_over_the_set() -> None:
    rng = np.random.default_rng(5)
    for _ in range(10):
        model = make_random_cmdp(rng)
        radius = 0.4
        ext = solve_extended_lp(ConfidenceSet(model.transitions, np.full((3, 2), radius)), model.costs, model.thresholds)
        if not ext.ok:
            assert ext.status == "Infeasible", ext.message
            continue
        assert ext.kernel is not None and ext.occupancy is not None
        mass = ext.occupancy.mu > 1e-3
        distance = np.abs(ext.kernel - model.transitions).sum(axis=2)
        assert np.all(distance[mass] <= radius + 1e-6)
        # Any kernel inside the set does no better than the optimistic one.
        for _ in range(5):
            other = rng.dirichlet(np.ones(3), size=(3, 2))
            weight = radius / 4.0
            member = model.with_transitions((1 - weight) * model.transitions + weight * other)
            plan = solve_cmdp_lp(member)
            if plan.ok:
                assert ext.objective <= plan.objective + 1e-6


def test_extended_lp_rejects_bad_shapes(random_cmdp: RandomCmdp) -> None:
    model = random_cmdp()
    conf = ConfidenceSet(model.transitions, np.zeros((3, 2)))
    with pytest.raises(InvalidModelError):
        solve_extended_lp(conf, model.costs[:1], model.thresholds)
    with pytest.raises(InvalidModelError):
        ConfidenceSet(model.transitions, np.zeros((2, 2)))


def test_slater_margin(two_state_cmdp: Cmdp, random_cmdp: RandomCmdp) -> None:
    assert slater_margin(two_state_cmdp) == pytest.approx(0.5, abs=1e-7)
    assert slater_margin(random_cmdp(n_constraints=0)) == math.inf
    model = random_cmdp()
    costs = model.costs.copy()
    costs[1] = 0.1 + 0.9 * costs[1]
    margin = slater_margin(Cmdp(model.transitions, costs, [0.0]))
    assert margin is not None and margin < 0
