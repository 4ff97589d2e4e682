from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, cast

import pytest
from mcp import ClientSession, StdioServerParameters
from mcp.client.stdio import stdio_client

from cmdp_lab import server_main
from cmdp_lab.cmdp import Cmdp
from cmdp_lab.config import dump_cmdp

SRC_PATH = Path(__file__).resolve().parents[1] / "src"


async def test_tools_are_registered() -> None:
    tools = await server_main.mcp.list_tools()
    assert {"plan_cmdp", "compile_environment", "run_experiment"} <= {t.name for t in tools}


def test_plan_tool(tmp_path: Path, two_state_cmdp: Cmdp) -> None:
    result = server_main.plan_cmdp(str(dump_cmdp(two_state_cmdp, tmp_path / "m.json")))
    assert result.ok
    assert result.objective == pytest.approx(0.5, abs=1e-7)


def test_run_experiment_tool_reports_failures(tmp_path: Path) -> None:
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"env": "atlantis", "horizon": 10}), encoding="utf-8")
    result = server_main.run_experiment(str(cfg))
    assert result.ok is False
    assert result.fail_reason and "atlantis" in result.fail_reason


def test_run_experiment_tool(tmp_path: Path) -> None:
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"env": "marsrover4x4", "horizon": 100, "agent": {"name": "uniform"}}), encoding="utf-8")
    result = server_main.run_experiment(str(cfg), n_runs=3)
    assert result.ok
    assert len(result.runs) == 3
    assert result.files == []


@pytest.mark.asyncio
async def test_server_integration_std_io() -> None:
    # Spawn the server module over stdio and exercise a tool end to end
    server_params = StdioServerParameters(
        command=sys.executable,
        args=["-m", "cmdp_lab.server_main"],
        env={"PYTHONPATH": str(SRC_PATH)},
    )

    async with stdio_client(server_params) as (read, write):
        async with ClientSession(read, write) as session:
            await session.initialize()

            tools = await session.list_tools()
            tool_names = {t.name for t in tools.tools}
            assert {"plan_cmdp", "compile_environment", "run_experiment"}.issubset(tool_names)

            res = await session.call_tool("compile_environment", {"env": "marsrover4x4"})
            assert res.structuredContent is not None
            payload = cast(dict[str, Any], res.structuredContent)
            assert payload["n_states"] == 14
            assert payload["variant"] == "marsrover"
