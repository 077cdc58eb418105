"""Run configuration: one INI file drives the model, controller, and training.

Every key has a default; unknown sections or keys are rejected with the
offending line number.  Values round-trip exactly through save/load
(floats are written with repr).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .biped import BipedModel, FsmSchedule
from .planner import PlannerConfig
from .rollout import ControllerGains, EpisodeConfig, RewardWeights


class ConfigError(ValueError):
    """Invalid run configuration; message carries file and line context."""


@dataclass(frozen=True)
class TrainConfig:
    sigma0: float = 1e-3
    rho: float = 0.1  # task sampling fraction of the active grid
    expand_every: int = 30  # curriculum period, iterations
    iterations: int = 100
    popsize: int = 0  # 0: 4 + floor(3 ln n)
    workers: int = 0  # 0: all available cores
    master_seed: int = 0
    stride_step: float = 0.1
    incline_step: float = 0.1
    stride_min: float = -0.4
    stride_max: float = 0.5
    incline_min: float = -0.4
    incline_max: float = 0.4
    initial_strides: tuple = (-0.1, 0.0, 0.1, 0.2)
    initial_inclines: tuple = (0.0,)

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ConfigError(f"training.sigma0 must be positive, got {self.sigma0}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"training.rho must be in (0, 1], got {self.rho}")
        if self.expand_every < 1 or self.iterations < 1:
            raise ConfigError("training.expand_every and iterations must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: BipedModel = field(default_factory=BipedModel)
    schedule: FsmSchedule = field(default_factory=FsmSchedule)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    gains: ControllerGains = field(default_factory=ControllerGains)
    reward: RewardWeights = field(default_factory=RewardWeights)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        inner = like[0] if like else 0.0
        return tuple(_parse(p, inner) for p in parts)
    return text.strip()


# section name -> (RunConfig attribute, dataclass); output_dir handled apart
_SECTIONS = {
    "model": "model",
    "fsm": "schedule",
    "planner": "planner",
    "gains": "gains",
    "reward": "reward",
    "episode": "episode",
    "training": "train",
}


def _section_items(cfg: RunConfig, section: str):
    obj = getattr(cfg, _SECTIONS[section])
    return obj, {f.name: getattr(obj, f.name) for f in fields(obj)}


def save_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in _SECTIONS:
        _, items = _section_items(cfg, section)
        parser[section] = {k: _format(v) for k, v in items.items()}
    parser["output"] = {"directory": cfg.output_dir}
    with open(path, "w") as fh:
        parser.write(fh)


def config_text(cfg: RunConfig) -> str:
    buf = io.StringIO()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section in _SECTIONS:
        _, items = _section_items(cfg, section)
        parser[section] = {k: _format(v) for k, v in items.items()}
    parser["output"] = {"directory": cfg.output_dir}
    parser.write(buf)
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def _find_line(path, needle: str) -> int | None:
    try:
        with open(path) as fh:
            for i, line in enumerate(fh, start=1):
                stripped = line.strip()
                if stripped.startswith(needle) or stripped.startswith(f"[{needle}]"):
                    return i
    except OSError:
        pass
    return None


def load_config(path) -> RunConfig:
    """Defaults overridden by the file; every invariant re-validated."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    cfg = RunConfig()
    updates: dict = {}
    for section in parser.sections():
        if section == "output":
            for key, value in parser["output"].items():
                if key != "directory":
                    line = _find_line(path, key)
                    raise ConfigError(f"{path}:{line}: unknown key 'output.{key}'")
                updates["output_dir"] = value.strip()
            continue
        if section not in _SECTIONS:
            line = _find_line(path, section)
            raise ConfigError(f"{path}:{line}: unknown section [{section}]")
        obj, items = _section_items(cfg, section)
        changes = {}
        for key, value in parser[section].items():
            if key not in items:
                line = _find_line(path, key)
                raise ConfigError(f"{path}:{line}: unknown key '{section}.{key}'")
            try:
                changes[key] = _parse(value, items[key])
            except ValueError as exc:
                line = _find_line(path, key)
                raise ConfigError(
                    f"{path}:{line}: bad value for '{section}.{key}': {exc}"
                ) from exc
        if changes:
            try:
                updates[_SECTIONS[section]] = replace(obj, **changes)
            except (ValueError, ConfigError) as exc:
                line = _find_line(path, next(iter(changes)))
                raise ConfigError(f"{path}:{line}: {exc}") from exc
    try:
        return replace(cfg, **updates)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
