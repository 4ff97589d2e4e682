from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


Cell = tuple[int, int]
Variant = Literal["marsrover", "box"]
AgentName = Literal["psconrl", "conrl", "cucrl", "ucrlcmdp", "oracle", "uniform"]
PlanStatusName = Literal["Optimal", "Infeasible", "NumericalFailure"]


# --------------------------------------------------------------------------------------
# File formats


class CmdpFileModel(BaseModel):
    n_states: int = Field(ge=1)
    n_actions: int = Field(ge=1)
    n_constraints: int = Field(ge=0)
    transitions: list[list[list[float]]] = Field(description="transitions[s][a][s']")
    costs: list[list[list[float]]] = Field(description="costs[i][s][a] for i = 0..m")
    thresholds: list[float] = Field(default_factory=list)
    initial_state: int = 0

    @model_validator(mode="after")
    def _check_dimensions(self) -> "CmdpFileModel":
        S, A, m = self.n_states, self.n_actions, self.n_constraints
        if len(self.transitions) != S or any(len(row) != A for row in self.transitions):
            raise ValueError(f"transitions must be {S} x {A} x {S}")
        if any(len(dist) != S for row in self.transitions for dist in row):
            raise ValueError(f"transitions must be {S} x {A} x {S}")
        if len(self.costs) != m + 1 or any(len(c) != S or any(len(r) != A for r in c) for c in self.costs):
            raise ValueError(f"costs must be {m + 1} x {S} x {A}")
        if len(self.thresholds) != m:
            raise ValueError(f"thresholds must have {m} entries")
        return self


class GridSpec(BaseModel):
    """Gridworld layout. Cells are (row, col) with row 0 at the top."""

    model_config = ConfigDict(frozen=True)

    name: str = ""
    variant: Variant
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    walls: frozenset[Cell] = frozenset()
    start: Cell
    goal: Cell
    risky: frozenset[Cell] = frozenset()
    box_start: Optional[Cell] = None
    slip: float = Field(default=0.1, ge=0.0, lt=1.0)
    threshold: float = Field(default=0.2, ge=0.0, le=1.0)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    @model_validator(mode="after")
    def _check_layout(self) -> "GridSpec":
        named = [("start", self.start), ("goal", self.goal)]
        if self.box_start is not None:
            named.append(("box_start", self.box_start))
        for label, cell in named:
            if not self.in_bounds(cell):
                raise ValueError(f"{label} {cell} is outside the {self.height}x{self.width} grid")
            if cell in self.walls:
                raise ValueError(f"{label} {cell} is a wall")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        for cell in self.walls | self.risky:
            if not self.in_bounds(cell):
                raise ValueError(f"cell {cell} is outside the {self.height}x{self.width} grid")
        if self.variant == "box":
            if self.box_start is None:
                raise ValueError("box variant requires box_start")
            if self.box_start in (self.start, self.goal):
                raise ValueError("box_start must differ from start and goal")
            if self.risky:
                raise ValueError("risky cells are a marsrover feature")
        elif self.box_start is not None:
            raise ValueError("box_start is only valid for the box variant")
        return self


class AgentConfig(BaseModel):
    name: AgentName = "psconrl"
    prior_alpha: float = Field(default=0.01, gt=0.0)
    delta: Optional[float] = Field(default=None, gt=0.0, le=1.0, description="Defaults to 1/T")
    bonus_scale: float = Field(default=1.0, ge=0.0)
    h: int = Field(default=100, ge=1, description="C-UCRL exploration block length")
    alpha: float = Field(default=0.5, gt=0.0, le=1.0, description="UCRL-CMDP episode length exponent")


class ExperimentConfig(BaseModel):
    env: str = Field(description="Shipped layout name or path to a GridSpec file")
    agent: AgentConfig = Field(default_factory=AgentConfig)
    horizon: int = Field(ge=0)
    n_runs: int = Field(default=1, ge=1)
    base_seed: int = 0
    output: Optional[Path] = None
    cadence: int = Field(default=100, ge=1)
    full_trace: bool = False
    workers: int = Field(default=1, ge=1)
    save_posterior: bool = False
    hitting_time_bound: Optional[float] = Field(default=None, gt=0.0)

    @field_validator("env")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("env must name a layout or a file")
        return value

    @property
    def effective_cadence(self) -> int:
        return 1 if self.full_trace else self.cadence


# --------------------------------------------------------------------------------------
# Structured results (CLI and MCP)


class PlanResultModel(BaseModel):
    ok: bool
    status: PlanStatusName
    objective: Optional[float] = None
    occupancy: Optional[list[list[float]]] = None
    policy: Optional[list[list[float]]] = None
    phase_one: Optional[float] = None
    message: str = ""


class EnvironmentSummaryModel(BaseModel):
    name: str
    variant: Variant
    n_states: int
    n_actions: int
    threshold: float
    optimal_loss: Optional[float] = Field(default=None, description="J* of the constrained problem")
    unconstrained_loss: Optional[float] = None
    slater_margin: Optional[float] = None
    span: Optional[float] = None
    hitting_time_estimate: Optional[float] = Field(default=None, description="Uniform policy")
    cover_time_bound: Optional[float] = None
    hitting_time_bound: Optional[float] = None
    within_bound: Optional[bool] = None


class RunSummaryModel(BaseModel):
    run_id: int
    seed: int
    n_episodes: int
    final_regret_signed: float
    final_violation_signed: list[float]
    wall_clock_sec: float


class ExperimentSummaryModel(BaseModel):
    ok: bool
    fail_reason: Optional[str] = None
    algo: str
    env: str
    horizon: int
    optimal_loss: float
    thresholds: list[float]
    runs: list[RunSummaryModel]
    files: list[str] = Field(default_factory=list)
    wall_clock_sec: float = 0.0
