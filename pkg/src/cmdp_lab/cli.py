from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import click

from .config import load_cmdp, load_experiment_config
from .errors import CmdpLabError
from .harness import run_experiment, summarize_environment, sweep
from .models import PlanResultModel
from .planner import PlanOutcome, policy_from_occupancy, solve_cmdp_lp

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
PLAN_EXIT_CODES = {"Optimal": 0, "Infeasible": 2, "NumericalFailure": 3}


def _emit(payload: dict[str, Any]) -> None:
    # Deterministic JSON output
    click.echo(json.dumps(payload, ensure_ascii=False, sort_keys=True))


def _fails_as_json(command: Callable[..., None]) -> Callable[..., None]:
    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            command(*args, **kwargs)
        except CmdpLabError as exc:
            _emit({"ok": False, "fail_reason": str(exc)})
            sys.exit(1)

    return wrapper


def plan_result(outcome: PlanOutcome) -> PlanResultModel:
    occupancy = policy = None
    if outcome.occupancy is not None:
        occupancy = outcome.occupancy.mu.tolist()
        policy = policy_from_occupancy(outcome.occupancy).probs.tolist()
    return PlanResultModel(
        ok=outcome.ok,
        status=outcome.status,
        objective=outcome.objective,
        occupancy=occupancy,
        policy=policy,
        phase_one=outcome.phase_one,
        message=outcome.message,
    )


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="WARNING",
    show_default=True,
    help="Logging level for messages written to stderr",
)
def main(log_level: str) -> None:
    """Constrained MDP planning and learning experiments. Results are printed as JSON to stdout."""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, stream=sys.stderr)


@main.command()
@click.argument("cmdp_file", type=click.Path(dir_okay=False, exists=True, path_type=Path))
@_fails_as_json
def plan(cmdp_file: Path) -> None:
    """
    Solve the occupancy LP of a CMDP file.

    Exit code: 0 Optimal, 2 Infeasible, 3 NumericalFailure, 1 unreadable or invalid file.
    """
    outcome = solve_cmdp_lp(load_cmdp(cmdp_file))
    _emit(plan_result(outcome).model_dump(mode="json"))
    sys.exit(PLAN_EXIT_CODES[outcome.status])


@main.command()
@click.argument("config_file", type=click.Path(dir_okay=False, exists=True, path_type=Path))
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=None, help="Override the output directory")
@click.option("--runs", "n_runs", type=click.IntRange(min=1), default=None, help="Override n_runs")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Parallel worker processes")
@_fails_as_json
def run(config_file: Path, output: Optional[Path], n_runs: Optional[int], workers: Optional[int]) -> None:
    """Run one experiment config and print its summary."""
    config = load_experiment_config(config_file)
    overrides = {k: v for k, v in {"output": output, "n_runs": n_runs, "workers": workers}.items() if v is not None}
    if overrides:
        config = config.model_copy(update=overrides)
    _emit(run_experiment(config).model_dump(mode="json"))


@main.command("sweep")
@click.argument("config_dir", type=click.Path(file_okay=False, exists=True, path_type=Path))
@_fails_as_json
def sweep_command(config_dir: Path) -> None:
    """Run every *.json config in a directory, in sorted order."""
    summaries = sweep(config_dir)
    _emit({"ok": all(s.ok for s in summaries), "experiments": [s.model_dump(mode="json") for s in summaries]})


@main.command()
@click.argument("env")
@click.option("--hitting-time-bound", type=float, default=None, help="Report whether the uniform-policy hitting time is within H")
@_fails_as_json
def diagnose(env: str, hitting_time_bound: Optional[float]) -> None:
    """Reference losses and uniform-policy diagnostics of a layout (shipped name or GridSpec file)."""
    _emit(summarize_environment(env, hitting_time_bound).model_dump(mode="json"))


if __name__ == "__main__":
    main()
