"""Desk-scale end-to-end checks. Deselected by default; run with `pytest -m slow`."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from cmdp_lab.harness import AggregateReport, aggregate, prepare_problem, run_one
from cmdp_lab.models import ExperimentConfig

pytestmark = pytest.mark.slow


def config(**overrides: Any) -> ExperimentConfig:
    doc: dict[str, Any] = {"env": "marsrover4x4", "horizon": 100_000, "cadence": 1_000}
    doc.update(overrides)
    return ExperimentConfig.model_validate(doc)


def run_many(cfg: ExperimentConfig) -> AggregateReport:
    problem = prepare_problem(cfg)
    return aggregate([run_one(cfg, i, problem) for i in range(cfg.n_runs)])


def value_at(report: AggregateReport, column: str, t: int) -> float:
    idx = int(np.flatnonzero(report.t == t)[0])
    return float(report.mean[column][idx])


def regret_ratio(report: AggregateReport, horizon: int) -> float:
    return value_at(report, "regret_signed", horizon) / value_at(report, "regret_signed", horizon // 2)


def test_episode_accounting_over_seeded_runs() -> None:
    cfg = config(n_runs=20)
    problem = prepare_problem(cfg)
    S, A = problem.grid.model.n_states, problem.grid.model.n_actions
    bound = math.sqrt(2 * S * A * cfg.horizon * math.log(cfg.horizon)) + 1
    for i in range(cfg.n_runs):
        trace = run_one(cfg, i, problem)
        assert trace.n_episodes <= bound
        prev = 1
        for record in trace.episodes:
            assert record.stop_reason in ("doubling", "length")
            if record.stop_reason == "length":
                assert record.length == prev + 1
            prev = record.length


def test_fallback_executes_uniform_policy(always_risky_layout: Path) -> None:
    cfg = config(env=str(always_risky_layout), horizon=20_000, cadence=100)
    trace = run_one(cfg, 0)
    assert trace.values["fallback"].all()
    assert all(record.fallback for record in trace.episodes)


def test_psconrl_regret_is_sublinear_and_safe() -> None:
    horizon = 200_000
    report = run_many(config(horizon=horizon, n_runs=10))
    assert regret_ratio(report, horizon) < 1.9
    quarter = horizon // 4
    tail_aux = (value_at(report, "cum_c1", horizon) - value_at(report, "cum_c1", horizon - quarter)) / quarter
    assert tail_aux <= 0.2 + 0.05
    uniform = run_many(config(horizon=horizon, n_runs=3, agent={"name": "uniform"}))
    assert value_at(report, "regret_signed", horizon) * 3 < value_at(uniform, "regret_signed", horizon)


# At bonus_scale 1 the radius stays above 1 for thousands of visits per pair on a
# 14-state layout, which saturates every clipped estimate within this horizon.
BASELINE_BONUS_SCALE = 0.05


@pytest.mark.parametrize("name", ["conrl", "cucrl"])
def test_baselines_regret_is_sublinear(name: str) -> None:
    horizon = 100_000
    report = run_many(config(horizon=horizon, n_runs=3, agent={"name": name, "bonus_scale": BASELINE_BONUS_SCALE}))
    assert regret_ratio(report, horizon) < 1.9


def test_ucrlcmdp_completes_on_marsrover4x4() -> None:
    horizon = 100_000
    trace = run_one(config(horizon=horizon, agent={"name": "ucrlcmdp", "bonus_scale": BASELINE_BONUS_SCALE}), 0)
    assert trace.t[-1] == horizon
    assert trace.n_episodes == horizon // 317 + 1


def test_oracle_regret_is_small() -> None:
    report = run_many(config(horizon=100_000, agent={"name": "oracle"}))
    assert abs(value_at(report, "regret_signed", 100_000)) / 100_000 <= 0.02
