from __future__ import annotations

import json
import logging
from importlib import resources
from pathlib import Path

from pydantic import ValidationError

from .cmdp import Cmdp, validate
from .errors import ConfigError, InvalidModelError
from .models import CmdpFileModel, ExperimentConfig, GridSpec

logger = logging.getLogger(__name__)

LAYOUT_PACKAGE = "cmdp_lab"
LAYOUT_DIR = "layouts"


def shipped_layouts() -> list[str]:
    root = resources.files(LAYOUT_PACKAGE) / LAYOUT_DIR
    return sorted(p.name.removesuffix(".json") for p in root.iterdir() if p.name.endswith(".json"))


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _parse_grid_spec(text: str, origin: str) -> GridSpec:
    try:
        return GridSpec.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"invalid grid spec {origin}: {exc}") from exc


def load_grid_spec(ref: str | Path) -> GridSpec:
    """
    Resolve an environment reference.
    Preference order:
      1) an existing file path
      2) a shipped layout name (marsrover4x4, marsrover8x8, box6x6)
    """
    path = Path(ref)
    if path.is_file():
        return _parse_grid_spec(_read_text(path), str(path))
    name = str(ref)
    layout = resources.files(LAYOUT_PACKAGE) / LAYOUT_DIR / f"{name}.json"
    if layout.is_file():
        return _parse_grid_spec(layout.read_text(encoding="utf-8"), name)
    raise ConfigError(f"unknown environment {name!r}; expected a file or one of {shipped_layouts()}")


def load_cmdp(path: str | Path) -> Cmdp:
    """Read a CMDP file; rejects documents violating any Cmdp invariant."""
    p = Path(path)
    try:
        doc = CmdpFileModel.model_validate_json(_read_text(p))
    except ValidationError as exc:
        raise ConfigError(f"invalid CMDP file {p}: {exc}") from exc
    model = Cmdp(doc.transitions, doc.costs, doc.thresholds, doc.initial_state)
    violations = validate(model)
    if violations:
        raise InvalidModelError(f"CMDP file {p} rejected", violations)
    return model


def dump_cmdp(model: Cmdp, path: str | Path) -> Path:
    doc = CmdpFileModel(
        n_states=model.n_states,
        n_actions=model.n_actions,
        n_constraints=model.n_constraints,
        transitions=model.transitions.tolist(),
        costs=model.costs.tolist(),
        thresholds=model.thresholds.tolist(),
        initial_state=model.initial_state,
    )
    out = Path(path)
    out.write_text(json.dumps(doc.model_dump(), indent=2), encoding="utf-8")
    return out


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        config = ExperimentConfig.model_validate_json(_read_text(p))
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config {p}: {exc}") from exc
    # Relative env files and output dirs are resolved against the config's directory.
    env_path = p.parent / config.env
    updates: dict[str, object] = {}
    if not Path(config.env).is_file() and env_path.is_file():
        updates["env"] = str(env_path)
    if config.output is not None and not config.output.is_absolute():
        updates["output"] = p.parent / config.output
    return config.model_copy(update=updates) if updates else config
