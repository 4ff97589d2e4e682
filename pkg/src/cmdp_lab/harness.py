from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray

from .agents import (
    Agent,
    CUCRLAgent,
    ConRLAgent,
    EpisodeRecord,
    FixedPolicyAgent,
    PSConRLAgent,
    UCRLCMDPAgent,
)
from .cmdp import FloatArray, StationaryPolicy, diagnose
from .config import load_experiment_config, load_grid_spec
from .envs import CompiledGrid, GridEnv, compile_grid, solve_reference
from .errors import ConfigError, HarnessError, InfeasibleError, NonUnichainError
from .models import EnvironmentSummaryModel, ExperimentConfig, ExperimentSummaryModel, GridSpec, RunSummaryModel
from .planner import slater_margin
from .posterior import DirichletPosterior

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"
RUNS_CSV = "runs.csv"
AGGREGATE_CSV = "aggregate.csv"
SUMMARY_JSON = "summary.json"
# The extended LP has S * A * S joint variables; only the 4x4 rover stays tractable.
UCRLCMDP_MAX_STATES = 16


# --------------------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class Metrics:
    """Per-step cumulative metric columns, row t-1 holds the value after round t."""

    cum_costs: FloatArray  # (T, m + 1)
    regret_signed: FloatArray  # (T,)
    regret_pospart: FloatArray  # (T,)
    violation_signed: FloatArray  # (T, m)
    violation_pospart: FloatArray  # (T, m)


def compute_metrics(costs: ArrayLike, optimal_loss: float, thresholds: ArrayLike) -> Metrics:
    """
    Both metric families of a cost stream of shape (T, m + 1).

    Signed: sum c0 - t J* and sum ci - t tau_i. Positive part: sum (c0 - J*)+ and sum (ci - tau_i)+.
    """
    tau = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    stream = np.asarray(costs, dtype=np.float64).reshape(-1, tau.shape[0] + 1)
    t = np.arange(1, stream.shape[0] + 1, dtype=np.float64)
    cum = np.cumsum(stream, axis=0)
    excess_main = stream[:, 0] - optimal_loss
    excess_aux = stream[:, 1:] - tau
    return Metrics(
        cum_costs=cum,
        regret_signed=cum[:, 0] - t * optimal_loss,
        regret_pospart=np.cumsum(np.maximum(excess_main, 0.0)),
        violation_signed=cum[:, 1:] - t[:, None] * tau,
        violation_pospart=np.cumsum(np.maximum(excess_aux, 0.0), axis=0),
    )


def metric_columns(n_constraints: int) -> list[str]:
    cols = [f"cum_c{i}" for i in range(n_constraints + 1)]
    cols += ["regret_signed", "regret_pospart"]
    for i in range(1, n_constraints + 1):
        cols += [f"viol{i}_signed", f"viol{i}_pospart"]
    return cols + ["episode_k", "fallback"]


def csv_columns(n_constraints: int) -> list[str]:
    values = metric_columns(n_constraints)
    return ["kind", "run_id", "algo", "env", "t", *values, *(f"{c}_se" for c in values)]


# --------------------------------------------------------------------------------------
# Traces and reports


@dataclass
class RunTrace:
    run_id: int
    seed: int
    algo: str
    env: str
    n_constraints: int
    t: NDArray[np.int64]
    values: dict[str, FloatArray]
    episodes: list[EpisodeRecord] = field(default_factory=list)
    n_episodes: int = 0
    wall_clock_sec: float = 0.0
    posterior: Optional[DirichletPosterior] = None

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def final(self, column: str) -> float:
        return float(self.values[column][-1]) if len(self) else 0.0

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.t, **self.values})
        frame.insert(0, "kind", "run")
        frame.insert(1, "run_id", self.run_id)
        frame.insert(2, "algo", self.algo)
        frame.insert(3, "env", self.env)
        frame["fallback"] = frame["fallback"].astype(np.int64)
        return frame

    def summary(self) -> RunSummaryModel:
        return RunSummaryModel(
            run_id=self.run_id,
            seed=self.seed,
            n_episodes=self.n_episodes,
            final_regret_signed=self.final("regret_signed"),
            final_violation_signed=[self.final(f"viol{i}_signed") for i in range(1, self.n_constraints + 1)],
            wall_clock_sec=self.wall_clock_sec,
        )


@dataclass
class AggregateReport:
    algo: str
    env: str
    n_constraints: int
    t: NDArray[np.int64]
    mean: dict[str, FloatArray]
    stderr: dict[str, FloatArray]
    episodes_per_run: list[int]
    wall_clock_sec: list[float]

    @property
    def n_runs(self) -> int:
        return len(self.episodes_per_run)

    def average_costs(self) -> pd.DataFrame:
        """Running average cost cum_ci / t per cadence point."""
        t = np.maximum(self.t, 1).astype(np.float64)
        cols = {f"avg_c{i}": self.mean[f"cum_c{i}"] / t for i in range(self.n_constraints + 1)}
        return pd.DataFrame({"t": self.t, **cols})

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.t, **self.mean, **{f"{k}_se": v for k, v in self.stderr.items()}})
        frame.insert(0, "kind", "agg")
        frame.insert(1, "run_id", pd.array([pd.NA] * len(self.t), dtype="Int64"))
        frame.insert(2, "algo", self.algo)
        frame.insert(3, "env", self.env)
        return frame


def aggregate(traces: Sequence[RunTrace]) -> AggregateReport:
    """Mean and standard error across runs at every cadence point."""
    if not traces:
        raise HarnessError("cannot aggregate zero runs")
    first = traces[0]
    for trace in traces[1:]:
        if not np.array_equal(trace.t, first.t):
            raise HarnessError(f"run {trace.run_id} was recorded on a different time grid")
    n = len(traces)
    mean: dict[str, FloatArray] = {}
    stderr: dict[str, FloatArray] = {}
    for column in metric_columns(first.n_constraints):
        stack = np.stack([np.asarray(tr.values[column], dtype=np.float64) for tr in traces])
        mean[column] = stack.mean(axis=0)
        stderr[column] = stack.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(stack.shape[1])
    return AggregateReport(
        algo=first.algo,
        env=first.env,
        n_constraints=first.n_constraints,
        t=first.t.copy(),
        mean=mean,
        stderr=stderr,
        episodes_per_run=[tr.n_episodes for tr in traces],
        wall_clock_sec=[tr.wall_clock_sec for tr in traces],
    )


Exportable = Union[RunTrace, AggregateReport]


def export_csv(items: Union[Exportable, Iterable[Exportable]], path: Union[str, Path]) -> Path:
    batch = [items] if isinstance(items, (RunTrace, AggregateReport)) else list(items)
    if not batch:
        raise HarnessError("nothing to export")
    columns = csv_columns(batch[0].n_constraints)
    frame = pd.concat([item.to_frame() for item in batch], ignore_index=True).reindex(columns=columns)
    frame["run_id"] = frame["run_id"].astype("Int64")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info("wrote %d rows to %s", len(frame), out)
    return out


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(Path(path), float_precision="round_trip", dtype={"run_id": "Int64"})


# --------------------------------------------------------------------------------------
# Problems and agents


@dataclass(frozen=True)
class Problem:
    spec: GridSpec
    grid: CompiledGrid
    optimal_loss: float
    optimal_policy: Optional[StationaryPolicy]
    feasible: bool

    @property
    def label(self) -> str:
        return self.spec.name or self.spec.variant


def prepare_problem(config: ExperimentConfig) -> Problem:
    spec = load_grid_spec(config.env)
    grid = compile_grid(spec)
    label = spec.name or spec.variant
    try:
        loss, policy = solve_reference(grid.model, label)
        return Problem(spec, grid, loss, policy, feasible=True)
    except InfeasibleError:
        # Regret is then measured against the unconstrained optimum.
        model = grid.model.with_thresholds(np.ones(grid.model.n_constraints))
        loss, _ = solve_reference(model, label)
        logger.warning("%s is infeasible at tau=%s; regret reference is the unconstrained loss %.6f", label, spec.threshold, loss)
        return Problem(spec, grid, loss, None, feasible=False)


def build_agent(config: ExperimentConfig, problem: Problem, rng: np.random.Generator) -> Agent:
    model = problem.grid.model
    S, A, m = model.n_states, model.n_actions, model.n_constraints
    params = config.agent
    delta = params.delta if params.delta is not None else 1.0 / max(config.horizon, 1)
    baseline = dict(delta=delta, bonus_scale=params.bonus_scale)
    match params.name:
        case "psconrl":
            return PSConRLAgent(model.costs, model.thresholds, rng, params.prior_alpha, model.initial_state)
        case "conrl":
            return ConRLAgent(S, A, model.thresholds, rng, **baseline)
        case "cucrl":
            return CUCRLAgent(S, A, model.thresholds, rng, h=params.h, **baseline)
        case "ucrlcmdp":
            if S > UCRLCMDP_MAX_STATES:
                raise ConfigError(
                    f"ucrlcmdp supports layouts with at most {UCRLCMDP_MAX_STATES} states; {problem.label} has {S}"
                )
            return UCRLCMDPAgent(S, A, model.thresholds, rng, horizon=config.horizon, alpha=params.alpha, **baseline)
        case "oracle":
            if problem.optimal_policy is None:
                raise InfeasibleError(f"{problem.label}: no feasible policy for the oracle agent")
            return FixedPolicyAgent(problem.optimal_policy, m + 1, rng, name="oracle")
        case "uniform":
            return FixedPolicyAgent(StationaryPolicy.uniform(S, A), m + 1, rng, name="uniform")
    raise ConfigError(f"unknown agent {params.name!r}")


# --------------------------------------------------------------------------------------
# Runs


def _recorded(t: int, horizon: int, cadence: int) -> bool:
    return t % cadence == 0 or t == horizon


def run_one(config: ExperimentConfig, run_index: int, problem: Optional[Problem] = None) -> RunTrace:
    """
    Play `horizon` rounds of the configured agent with seed base_seed + run_index.

    The agent and the simulator draw from independent streams spawned from that seed.
    """
    problem = problem or prepare_problem(config)
    model = problem.grid.model
    S, A, m = model.n_states, model.n_actions, model.n_constraints
    horizon, cadence = config.horizon, config.effective_cadence
    seed = config.base_seed + run_index
    agent_seq, env_seq = np.random.SeedSequence(seed).spawn(2)
    agent_rng, env_rng = np.random.default_rng(agent_seq), np.random.default_rng(env_seq)

    started = time.perf_counter()
    agent = build_agent(config, problem, agent_rng)
    env = GridEnv(problem.grid)
    state = env.reset()
    logger.info("run %d: %s on %s, T=%d, seed=%d", run_index, config.agent.name, problem.label, horizon, seed)

    tally = np.zeros((S, A, S), dtype=np.int64)
    costs = np.empty((horizon, m + 1))
    points: list[int] = []
    episode_k: list[int] = []
    fallback: list[bool] = []
    for t in range(1, horizon + 1):
        action = agent.step(state)
        next_state, step_costs = env.step(action, env_rng)
        agent.observe(state, action, step_costs, next_state)
        tally[state, action, next_state] += 1
        costs[t - 1] = step_costs
        if _recorded(t, horizon, cadence):
            if not np.array_equal(tally, agent.transition_counts):
                raise HarnessError(f"run {run_index}: agent counts diverged from the harness tally at t={t}")
            points.append(t)
            episode_k.append(agent.episode_index)
            fallback.append(agent.fallback_active)
        state = next_state

    metrics = compute_metrics(costs, problem.optimal_loss, model.thresholds)
    rows = np.asarray(points, dtype=np.int64) - 1
    values: dict[str, FloatArray] = {}
    for i in range(m + 1):
        values[f"cum_c{i}"] = metrics.cum_costs[rows, i]
    values["regret_signed"] = metrics.regret_signed[rows]
    values["regret_pospart"] = metrics.regret_pospart[rows]
    for i in range(1, m + 1):
        values[f"viol{i}_signed"] = metrics.violation_signed[rows, i - 1]
        values[f"viol{i}_pospart"] = metrics.violation_pospart[rows, i - 1]
    values["episode_k"] = np.asarray(episode_k, dtype=np.int64)
    values["fallback"] = np.asarray(fallback, dtype=bool)

    elapsed = time.perf_counter() - started
    trace = RunTrace(
        run_id=run_index,
        seed=seed,
        algo=config.agent.name,
        env=problem.label,
        n_constraints=m,
        t=rows + 1,
        values=values,
        episodes=list(agent.episodes),
        n_episodes=agent.episode_index,
        wall_clock_sec=elapsed,
        posterior=agent.posterior if isinstance(agent, PSConRLAgent) else None,
    )
    logger.info("run %d finished in %.2fs: K_T=%d, regret=%.3f", run_index, elapsed, trace.n_episodes, trace.final("regret_signed"))
    return trace


def run_experiment(config: ExperimentConfig, problem: Optional[Problem] = None) -> ExperimentSummaryModel:
    """Run every seed, aggregate, and write runs.csv, aggregate.csv and summary.json when `output` is set."""
    started = time.perf_counter()
    problem = problem or prepare_problem(config)
    indices = range(config.n_runs)
    if config.workers > 1 and config.n_runs > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            traces = list(pool.map(run_one, [config] * config.n_runs, indices, [problem] * config.n_runs))
    else:
        traces = [run_one(config, i, problem) for i in indices]
    report = aggregate(traces)
    logger.info("aggregated %d runs of %s on %s", report.n_runs, report.algo, report.env)

    summary = ExperimentSummaryModel(
        ok=True,
        algo=config.agent.name,
        env=problem.label,
        horizon=config.horizon,
        optimal_loss=problem.optimal_loss,
        thresholds=problem.grid.model.thresholds.tolist(),
        runs=[trace.summary() for trace in traces],
    )
    files: list[str] = []
    if config.output is not None:
        out_dir = Path(config.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        files.append(str(export_csv(traces, out_dir / RUNS_CSV)))
        files.append(str(export_csv(report, out_dir / AGGREGATE_CSV)))
        if config.save_posterior:
            for trace in traces:
                if trace.posterior is not None:
                    files.append(str(trace.posterior.save_snapshot(out_dir / f"posterior_run{trace.run_id}.npz")))
        files.append(str(out_dir / SUMMARY_JSON))
    summary = summary.model_copy(update={"files": files, "wall_clock_sec": time.perf_counter() - started})
    if config.output is not None:
        (Path(config.output) / SUMMARY_JSON).write_text(
            json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
        )
    return summary


def sweep(config_dir: Union[str, Path]) -> list[ExperimentSummaryModel]:
    """Run every *.json experiment config of a directory in sorted order."""
    root = Path(config_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    paths = sorted(root.glob("*.json"))
    if not paths:
        raise ConfigError(f"no experiment configs (*.json) in {root}")
    return [run_experiment(load_experiment_config(path)) for path in paths]


# --------------------------------------------------------------------------------------
# Environment reports


def summarize_environment(env: str, hitting_time_bound: Optional[float] = None) -> EnvironmentSummaryModel:
    """Sizes, reference losses and uniform-policy diagnostics of a layout."""
    spec = load_grid_spec(env)
    grid = compile_grid(spec)
    model = grid.model
    label = spec.name or spec.variant
    summary = EnvironmentSummaryModel(
        name=label,
        variant=spec.variant,
        n_states=model.n_states,
        n_actions=model.n_actions,
        threshold=spec.threshold,
        hitting_time_bound=hitting_time_bound,
        slater_margin=slater_margin(model),
    )
    updates: dict[str, object] = {}
    try:
        updates["optimal_loss"] = solve_reference(model, label)[0]
    except InfeasibleError:
        logger.warning("%s: no stationary policy meets tau=%s", label, spec.threshold)
    updates["unconstrained_loss"] = solve_reference(model.with_thresholds(np.ones(model.n_constraints)), label)[0]
    try:
        diag = diagnose(model, StationaryPolicy.uniform(model.n_states, model.n_actions), hitting_time_bound)
        updates.update(
            span=diag.span,
            hitting_time_estimate=diag.hitting_time_estimate,
            cover_time_bound=diag.cover_time_bound,
            within_bound=diag.within_bound,
        )
    except NonUnichainError as exc:
        logger.warning("%s: uniform-policy diagnostics unavailable (%s)", label, exc)
    return summary.model_copy(update=updates)
