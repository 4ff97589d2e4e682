from __future__ import annotations

from typing import Optional

from mcp.server.fastmcp import FastMCP

from .cli import plan_result
from .config import load_cmdp, load_experiment_config
from .errors import CmdpLabError
from .harness import run_experiment as do_run_experiment
from .harness import summarize_environment
from .models import EnvironmentSummaryModel, ExperimentSummaryModel, PlanResultModel
from .planner import solve_cmdp_lp


mcp = FastMCP("CMDP Lab Server")


@mcp.tool()
def plan_cmdp(cmdp_path: str) -> PlanResultModel:
    """
    Solve the occupancy-measure LP of a CMDP file and return the optimal occupancy and policy.
    """
    return plan_result(solve_cmdp_lp(load_cmdp(cmdp_path)))


@mcp.tool()
def compile_environment(env: str, hitting_time_bound: Optional[float] = None) -> EnvironmentSummaryModel:
    """
    Compile a gridworld layout (shipped name or GridSpec file) and report its size, reference losses and diagnostics.
    """
    return summarize_environment(env, hitting_time_bound)


@mcp.tool()
def run_experiment(config_path: str, n_runs: Optional[int] = None) -> ExperimentSummaryModel:
    """
    Run an experiment config file and return per-run episode counts and final regret/violation.
    """
    try:
        config = load_experiment_config(config_path)
        if n_runs is not None:
            config = config.model_copy(update={"n_runs": n_runs})
        return do_run_experiment(config)
    except CmdpLabError as exc:
        return ExperimentSummaryModel(
            ok=False,
            fail_reason=str(exc),
            algo="",
            env=config_path,
            horizon=0,
            optimal_loss=0.0,
            thresholds=[],
            runs=[],
        )


def main() -> None:
    # Run the FastMCP server over stdio (default transport for direct execution)
    mcp.run()


if __name__ == "__main__":
    main()
