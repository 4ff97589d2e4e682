from __future__ import annotations

import json

# Ensure the src/ layout is importable in tests without installing the package
import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_PATH = PROJECT_ROOT / "src"
if str(SRC_PATH) not in sys.path:
    sys.path.insert(0, str(SRC_PATH))

from cmdp_lab.cmdp import Cmdp  # noqa: E402


RandomCmdp = Callable[..., Cmdp]


def make_random_cmdp(
    rng: np.random.Generator,
    n_states: int = 3,
    n_actions: int = 2,
    n_constraints: int = 1,
    threshold_range: tuple[float, float] = (0.2, 0.8),
) -> Cmdp:
    """Dense (hence ergodic under every policy) random CMDP."""
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    costs = rng.random((n_constraints + 1, n_states, n_actions))
    thresholds = rng.uniform(*threshold_range, size=n_constraints)
    return Cmdp(transitions, costs, thresholds)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240229)


@pytest.fixture
def random_cmdp(rng: np.random.Generator) -> RandomCmdp:
    def factory(**kwargs: object) -> Cmdp:
        return make_random_cmdp(rng, **kwargs)  # type: ignore[arg-type]

    return factory


@pytest.fixture
def two_state_cmdp() -> Cmdp:
    """
    Action 0 stays, action 1 switches. State 0 is cheap but risky, state 1 expensive but safe.
    """
    transitions = np.array(
        [
            [[1.0, 0.0], [0.0, 1.0]],
            [[0.0, 1.0], [1.0, 0.0]],
        ]
    )
    costs = np.array(
        [
            [[0.0, 0.0], [1.0, 1.0]],
            [[1.0, 1.0], [0.0, 0.0]],
        ]
    )
    return Cmdp(transitions, costs, [0.5])


@pytest.fixture
def always_risky_layout(tmp_path: Path) -> Path:
    """A corridor where every cell, goal included, is risky: infeasible at tau = 0."""
    doc = {
        "name": "always-risky",
        "variant": "marsrover",
        "width": 3,
        "height": 1,
        "start": [0, 0],
        "goal": [0, 2],
        "risky": [[0, 0], [0, 1], [0, 2]],
        "slip": 0.1,
        "threshold": 0.0,
    }
    path = tmp_path / "always_risky.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
