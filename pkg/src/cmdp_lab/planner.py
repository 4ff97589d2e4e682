from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.optimize import linprog

from .cmdp import SIMPLEX_TOL, Cmdp, FloatArray, StationaryPolicy, Violation, frozen_array
from .errors import InvalidModelError

logger = logging.getLogger(__name__)

PlanStatus = Literal["Optimal", "Infeasible", "NumericalFailure"]

FEASIBILITY_TOL = 1e-7
OPTIMALITY_TOL = 1e-7
ZERO_MASS = 1e-12

Matrix = sparse.csr_array


@dataclass(frozen=True)
class OccupancyMeasure:
    mu: FloatArray  # (S, A)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", frozen_array(self.mu))

    def state_marginal(self) -> FloatArray:
        return self.mu.sum(axis=1)


@dataclass(frozen=True)
class PlanOutcome:
    status: PlanStatus
    occupancy: Optional[OccupancyMeasure] = None
    objective: Optional[float] = None
    # Kernel the occupancy is consistent with (the candidate kernel for the extended program).
    kernel: Optional[FloatArray] = None
    # Phase-one optimum; > FEASIBILITY_TOL certifies infeasibility.
    phase_one: Optional[float] = None
    message: str = ""

    def __post_init__(self) -> None:
        if (self.occupancy is not None) != (self.status == "Optimal"):
            raise ValueError("occupancy must be present iff status is Optimal")

    @property
    def ok(self) -> bool:
        return self.status == "Optimal"

    @property
    def reward(self) -> Optional[float]:
        """Objective in reward terms, r = 1 - c0."""
        return None if self.objective is None else 1.0 - self.objective


@dataclass(frozen=True)
class ConfidenceSet:
    center: FloatArray  # (S, A, S)
    radii: FloatArray  # (S, A)

    def __post_init__(self) -> None:
        center = frozen_array(self.center)
        radii = frozen_array(self.radii)
        if center.ndim != 3 or radii.shape != center.shape[:2]:
            raise InvalidModelError(f"confidence set shapes {center.shape} / {radii.shape} do not match")
        problems: list[Violation] = []
        if np.any(radii < 0):
            problems.append(Violation("radii", (), "negative radius"))
        rows_bad = np.any(center < 0, axis=2) | (np.abs(center.sum(axis=2) - 1.0) > SIMPLEX_TOL)
        for s, a in zip(*np.nonzero(rows_bad)):
            problems.append(Violation("center", (int(s), int(a)), "row is not on the simplex"))
        if problems:
            raise InvalidModelError("invalid confidence set", problems)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radii", radii)


# --------------------------------------------------------------------------------------
# LP backend


@dataclass(frozen=True)
class LinearProgram:
    """min objective @ x  s.t.  a_ub @ x <= b_ub,  a_eq @ x == b_eq,  x within bounds (default x >= 0)."""

    objective: FloatArray
    a_ub: Optional[Matrix] = None
    b_ub: Optional[FloatArray] = None
    a_eq: Optional[Matrix] = None
    b_eq: Optional[FloatArray] = None
    bounds: Optional[Sequence[tuple[Optional[float], Optional[float]]]] = None

    @property
    def n_variables(self) -> int:
        return self.objective.shape[0]


@dataclass(frozen=True)
class LpSolution:
    status: PlanStatus
    x: Optional[FloatArray] = None
    value: Optional[float] = None
    message: str = ""


class LpBackend(Protocol):
    def solve(self, program: LinearProgram) -> LpSolution: ...


@dataclass(frozen=True)
class HighsBackend:
    """
    scipy's HiGHS interface. The dual simplex runs first, then interior point; the last
    resort is plain `highs` with the solver's own default options.
    """

    methods: tuple[str, ...] = ("highs-ds", "highs-ipm", "highs")
    feasibility_tol: float = FEASIBILITY_TOL
    optimality_tol: float = OPTIMALITY_TOL
    time_limit: Optional[float] = None

    def _options(self, method: str) -> dict[str, object]:
        opts: dict[str, object] = {}
        if method != "highs":
            opts["primal_feasibility_tolerance"] = self.feasibility_tol
            opts["dual_feasibility_tolerance"] = self.feasibility_tol
        if method == "highs-ipm":
            opts["ipm_optimality_tolerance"] = self.optimality_tol
        if self.time_limit is not None:
            opts["time_limit"] = self.time_limit
        return opts

    def solve(self, program: LinearProgram) -> LpSolution:
        last = ""
        for method in self.methods:
            try:
                res = linprog(
                    program.objective,
                    A_ub=program.a_ub,
                    b_ub=program.b_ub,
                    A_eq=program.a_eq,
                    b_eq=program.b_eq,
                    bounds=program.bounds if program.bounds is not None else (0, None),
                    method=method,
                    options=self._options(method),
                )
            except (ValueError, np.linalg.LinAlgError) as exc:
                last = f"{method}: {exc}"
                logger.warning("linprog raised with %s: %s", method, exc)
                continue
            if res.status == 0:
                return LpSolution("Optimal", x=np.asarray(res.x, dtype=np.float64), value=float(res.fun))
            if res.status == 2:
                return LpSolution("Infeasible", message=str(res.message))
            last = f"{method}: status {res.status}: {res.message}"
            logger.warning("linprog did not converge with %s (status %d): %s", method, res.status, res.message)
        return LpSolution("NumericalFailure", message=last)


DEFAULT_BACKEND: LpBackend = HighsBackend()


def phase_one(program: LinearProgram, backend: LpBackend = DEFAULT_BACKEND) -> Optional[float]:
    """
    Minimum total constraint violation of the program (0 iff feasible).

    Equalities get a split artificial pair, inequalities a single artificial slack.
    Returns None if the auxiliary program itself could not be solved.
    """
    n = program.n_variables
    blocks_eq: list[Matrix] = []
    blocks_ub: list[Matrix] = []
    n_eq = 0 if program.a_eq is None else program.a_eq.shape[0]
    n_ub = 0 if program.a_ub is None else program.a_ub.shape[0]
    width = n + 2 * n_eq + n_ub
    if n_eq:
        assert program.a_eq is not None
        blocks_eq = [
            program.a_eq,
            sparse.eye_array(n_eq, format="csr"),
            -sparse.eye_array(n_eq, format="csr"),
        ]
        if n_ub:
            blocks_eq.append(sparse.csr_array((n_eq, n_ub)))
    if n_ub:
        assert program.a_ub is not None
        blocks_ub = [
            program.a_ub,
            sparse.csr_array((n_ub, 2 * n_eq)),
            -sparse.eye_array(n_ub, format="csr"),
        ]
        if not n_eq:
            blocks_ub.pop(1)
    objective = np.concatenate([np.zeros(n), np.ones(width - n)])
    bounds = list(program.bounds) if program.bounds is not None else [(0.0, None)] * n
    bounds += [(0.0, None)] * (width - n)
    aux = LinearProgram(
        objective=objective,
        a_ub=sparse.hstack(blocks_ub, format="csr") if n_ub else None,
        b_ub=program.b_ub,
        a_eq=sparse.hstack(blocks_eq, format="csr") if n_eq else None,
        b_eq=program.b_eq,
        bounds=bounds,
    )
    sol = backend.solve(aux)
    if sol.status != "Optimal" or sol.value is None:
        return None
    return max(sol.value, 0.0)


def _solve_certified(program: LinearProgram, backend: LpBackend) -> tuple[LpSolution, Optional[float]]:
    sol = backend.solve(program)
    if sol.status != "Infeasible":
        return sol, None
    residual = phase_one(program, backend)
    if residual is None:
        return LpSolution("NumericalFailure", message="phase-one program failed"), None
    if residual > FEASIBILITY_TOL:
        return LpSolution("Infeasible", message=f"phase-one optimum {residual:.3e}"), residual
    return (
        LpSolution(
            "NumericalFailure",
            message=f"solver reported infeasible but phase-one optimum is {residual:.3e}",
        ),
        residual,
    )


# --------------------------------------------------------------------------------------
# Occupancy-measure LP


def _row_of_ones(n: int) -> Matrix:
    return sparse.csr_array(np.ones((1, n)))


def _flow_matrix(transitions: FloatArray) -> Matrix:
    """Row s: sum_a mu(s,a) - sum_{s',a} mu(s',a) p(s|s',a)."""
    S, A, _ = transitions.shape
    outflow = sparse.kron(sparse.eye_array(S), np.ones((1, A)), format="csr")
    inflow = sparse.csr_array(transitions.reshape(S * A, S).T)
    return sparse.csr_array(outflow - inflow)


def occupancy_violations(
    mu: FloatArray, transitions: FloatArray, costs: FloatArray, thresholds: FloatArray
) -> list[str]:
    problems: list[str] = []
    if np.any(mu < -FEASIBILITY_TOL):
        problems.append("negative occupancy")
    if abs(mu.sum() - 1.0) > FEASIBILITY_TOL:
        problems.append(f"occupancy sums to {mu.sum():.10g}")
    flow = _flow_matrix(transitions) @ mu.reshape(-1)
    if np.max(np.abs(flow)) > FEASIBILITY_TOL:
        problems.append(f"flow residual {np.max(np.abs(flow)):.3e}")
    if thresholds.shape[0]:
        used = np.einsum("isa,sa->i", costs[1:], mu)
        if np.any(used > thresholds + FEASIBILITY_TOL):
            problems.append(f"constraint usage {used} exceeds thresholds {thresholds}")
    return problems


def _finish(
    status_sol: LpSolution,
    certificate: Optional[float],
    mu: Optional[FloatArray],
    transitions: FloatArray,
    costs: FloatArray,
    thresholds: FloatArray,
) -> PlanOutcome:
    if status_sol.status != "Optimal" or mu is None:
        return PlanOutcome(status_sol.status, phase_one=certificate, message=status_sol.message)
    mu = np.clip(mu, 0.0, None)
    mu = mu / mu.sum()
    problems = occupancy_violations(mu, transitions, costs, thresholds)
    if problems:
        logger.warning("LP solution failed verification: %s", "; ".join(problems))
        return PlanOutcome("NumericalFailure", message="; ".join(problems))
    return PlanOutcome(
        "Optimal",
        occupancy=OccupancyMeasure(mu),
        objective=float(np.sum(mu * costs[0])),
        kernel=frozen_array(transitions),
    )


def solve_cmdp_lp(model: Cmdp, backend: LpBackend = DEFAULT_BACKEND) -> PlanOutcome:
    """Minimize sum mu c0 over occupancy measures satisfying sum mu c_i <= tau_i."""
    S, A = model.n_states, model.n_actions
    n = S * A
    a_eq = sparse.vstack([_flow_matrix(model.transitions), _row_of_ones(n)], format="csr")
    b_eq = np.concatenate([np.zeros(S), [1.0]])
    m = model.n_constraints
    program = LinearProgram(
        objective=model.costs[0].reshape(n),
        a_ub=sparse.csr_array(model.costs[1:].reshape(m, n)) if m else None,
        b_ub=model.thresholds.copy() if m else None,
        a_eq=a_eq,
        b_eq=b_eq,
    )
    sol, certificate = _solve_certified(program, backend)
    mu = None if sol.x is None else sol.x.reshape(S, A)
    return _finish(sol, certificate, mu, model.transitions, model.costs, model.thresholds)


def policy_from_occupancy(mu: OccupancyMeasure) -> StationaryPolicy:
    """pi(a|s) = mu(s,a) / sum_a' mu(s,a'); states without mass get the uniform row."""
    weights = np.clip(mu.mu, 0.0, None)
    mass = weights.sum(axis=1, keepdims=True)
    n_actions = weights.shape[1]
    probs = np.where(mass > ZERO_MASS, weights / np.where(mass > ZERO_MASS, mass, 1.0), 1.0 / n_actions)
    return StationaryPolicy(probs / probs.sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------------------
# Extended program over (occupancy, candidate kernel)


def solve_extended_lp(
    conf_set: ConfidenceSet,
    costs: ArrayLike,
    thresholds: ArrayLike,
    backend: LpBackend = DEFAULT_BACKEND,
) -> PlanOutcome:
    """
    Optimistic planning over an L1 confidence set around an empirical kernel.

    Linearized with z(s,a,s') = mu(s,a) p'(s'|s,a) and split variables d+/d- for
    |z - mu p_bar|; rows satisfy sum_s' |z(s,a,s') - mu(s,a) p_bar(s'|s,a)| <= beta(s,a) mu(s,a).
    Maximizes sum mu (1 - c0), reported as the equivalent minimal sum mu c0.
    """
    center = conf_set.center
    S, A, _ = center.shape
    cost_arr = np.asarray(costs, dtype=np.float64)
    tau = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    m = tau.shape[0]
    if cost_arr.shape != (m + 1, S, A):
        raise InvalidModelError(f"costs must have shape ({m + 1}, {S}, {A}), got {cost_arr.shape}")
    n_pairs = S * A
    n_z = n_pairs * S
    eye_z = sparse.eye_array(n_z, format="csr")
    # mu = M @ z
    marginal = sparse.kron(sparse.eye_array(n_pairs), np.ones((1, S)), format="csr")
    spread = sparse.kron(sparse.eye_array(n_pairs), np.ones((S, S)), format="csr")
    trust = eye_z - sparse.diags_array(center.reshape(n_z)) @ spread
    zeros_z = sparse.csr_array((1, n_z))

    outflow = sparse.kron(sparse.eye_array(S), np.ones((1, A * S)), format="csr")
    inflow = sparse.kron(np.ones((1, n_pairs)), sparse.eye_array(S), format="csr")
    flow = outflow - inflow

    a_eq = sparse.vstack(
        [
            sparse.hstack([trust, -eye_z, eye_z]),
            sparse.hstack([flow, sparse.csr_array((S, 2 * n_z))]),
            sparse.hstack([_row_of_ones(n_z), zeros_z, zeros_z]),
        ],
        format="csr",
    )
    b_eq = np.concatenate([np.zeros(n_z + S), [1.0]])

    radius_rows = sparse.hstack(
        [-sparse.diags_array(conf_set.radii.reshape(n_pairs)) @ marginal, marginal, marginal]
    )
    ub_blocks = [radius_rows]
    if m:
        cost_rows = sparse.csr_array(cost_arr[1:].reshape(m, n_pairs)) @ marginal
        ub_blocks.append(sparse.hstack([cost_rows, sparse.csr_array((m, 2 * n_z))]))
    a_ub = sparse.vstack(ub_blocks, format="csr")
    b_ub = np.concatenate([np.zeros(n_pairs), tau])

    objective = np.concatenate([marginal.T @ cost_arr[0].reshape(n_pairs), np.zeros(2 * n_z)])
    program = LinearProgram(objective=objective, a_ub=a_ub, b_ub=b_ub, a_eq=a_eq, b_eq=b_eq)
    sol, certificate = _solve_certified(program, backend)
    if sol.x is None:
        return PlanOutcome(sol.status, phase_one=certificate, message=sol.message)
    z = np.clip(sol.x[:n_z], 0.0, None).reshape(S, A, S)
    z = z / z.sum()
    mu = z.sum(axis=2)
    safe_mu = np.where(mu > ZERO_MASS, mu, 1.0)[:, :, None]
    kernel = np.where(mu[:, :, None] > ZERO_MASS, z / safe_mu, center)
    kernel = kernel / kernel.sum(axis=2, keepdims=True)
    return _finish(sol, certificate, mu, kernel, cost_arr, tau)


def confidence_radius(n_visits: ArrayLike, t: float, delta: float, n_states: int, n_actions: int) -> FloatArray:
    """sqrt(14 S log(2 A t / delta) / max(1, N)); scalar in, 0-d array out."""
    visits = np.maximum(np.asarray(n_visits, dtype=np.float64), 1.0)
    return np.sqrt(14.0 * n_states * math.log(2.0 * n_actions * t / delta) / visits)


def slater_margin(model: Cmdp, backend: LpBackend = DEFAULT_BACKEND) -> Optional[float]:
    """
    Largest gamma with sum mu c_i + gamma <= tau_i for all constraints over the occupancy polytope.

    Positive iff some stationary policy satisfies every constraint strictly. Infinite for m = 0,
    None when the program could not be solved.
    """
    m = model.n_constraints
    if m == 0:
        return math.inf
    S, A = model.n_states, model.n_actions
    n = S * A
    a_eq = sparse.vstack(
        [
            sparse.hstack([_flow_matrix(model.transitions), sparse.csr_array((S, 1))]),
            sparse.hstack([_row_of_ones(n), sparse.csr_array((1, 1))]),
        ],
        format="csr",
    )
    a_ub = sparse.csr_array(np.hstack([model.costs[1:].reshape(m, n), np.ones((m, 1))]))
    objective = np.zeros(n + 1)
    objective[-1] = -1.0
    program = LinearProgram(
        objective=objective,
        a_ub=a_ub,
        b_ub=model.thresholds.copy(),
        a_eq=a_eq,
        b_eq=np.concatenate([np.zeros(S), [1.0]]),
        bounds=[(0.0, None)] * n + [(None, 1.0)],
    )
    sol = backend.solve(program)
    if sol.status != "Optimal" or sol.x is None:
        return None
    return float(sol.x[-1])


__all__ = [
    "ConfidenceSet",
    "DEFAULT_BACKEND",
    "FEASIBILITY_TOL",
    "HighsBackend",
    "LinearProgram",
    "LpBackend",
    "LpSolution",
    "OccupancyMeasure",
    "PlanOutcome",
    "PlanStatus",
    "confidence_radius",
    "occupancy_violations",
    "phase_one",
    "policy_from_occupancy",
    "slater_margin",
    "solve_cmdp_lp",
    "solve_extended_lp",
]
