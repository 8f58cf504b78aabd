"""Experiment configuration and its INI-file representation."""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

from .envs import EnvConfig
from .extractor import SIGMA_BAND

# mode -> (alpha, beta)
MODES = {
    "baseline": (0.0, 1.0),
    "semi": (0.3, 1.0),
    "full": (1.0, 0.0),
    "hindsight-full": (1.0, 0.0),
}


class ConfigError(ValueError):
    pass


@dataclass
class EsceConfig:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    threshold: float = 0.5
    sigma: float = 0.95
    phase1_epochs: int = 3
    phase2_max_iters: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    sensitive_fraction: float = 0.75
    calibrated_magnitude: float = 1.0


@dataclass
class AgentConfig:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 7e-4
    gamma: float = 0.99
    n_steps: int = 8
    entropy_coeff: float = 0.01
    value_coeff: float = 0.5
    max_grad_norm: float = 0.5
    workers: int = 1


@dataclass
class ExperimentConfig:
    mode: str = "baseline"
    seeds: List[int] = field(default_factory=lambda: [0])
    outer_iterations: int = 20
    pool_capacity: int = 2000
    sensitive_capacity: int = 500
    keep_sensitive: bool = False
    steps_per_iteration: int = 5000
    window: int = 20
    convergence_tol: float = 0.01
    convergence_patience: int = 3
    stop_on_convergence: bool = True
    log_wall_clock: bool = False
    output_dir: str = "runs/experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    esce: EsceConfig = field(default_factory=EsceConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    @property
    def mix(self) -> Tuple[float, float]:
        return MODES[self.mode]

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {sorted(MODES)}")
        if self.mode == "hindsight-full":
            self.env.hindsight = True
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name in ("outer_iterations",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("pool_capacity", "sensitive_capacity", "steps_per_iteration", "window", "convergence_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.agent.workers < 1:
            raise ConfigError("agent.workers must be at least 1")
        if not 0 < self.agent.gamma < 1:
            raise ConfigError("agent.gamma must lie in (0, 1)")
        if not SIGMA_BAND[0] <= self.esce.sigma <= SIGMA_BAND[1]:
            raise ConfigError(f"esce.sigma must lie in [{SIGMA_BAND[0]}, {SIGMA_BAND[1]}]")
        try:
            self.env.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


SECTIONS = {"env": EnvConfig, "esce": EsceConfig, "agent": AgentConfig}


def _coerce(raw, hint):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    s = raw.strip()
    if hint is bool:
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(s)
    if hint is float:
        return float(s)
    if hint is str:
        return s
    if origin in (list, tuple, List, Tuple):
        if args and typing.get_origin(args[0]) is tuple:
            # a list of cells, written "r,c; r,c"
            return tuple(_coerce(part, args[0]) for part in s.split(";") if part.strip())
        inner = args[0] if args else str
        return (list if origin in (list, List) else tuple)(
            _coerce(part, inner) for part in s.replace("(", "").replace(")", "").split(",") if part.strip())
    return s


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return "; ".join(_format(v) for v in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def set_field(obj, name: str, raw):
    hints = typing.get_type_hints(type(obj))
    if name not in hints:
        raise ConfigError(f"unknown setting {name!r} for {type(obj).__name__}")
    try:
        setattr(obj, name, _coerce(raw, hints[name]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r} for {name}: {exc}") from exc


def apply_override(cfg: ExperimentConfig, key: str, raw):
    """Set ``key`` (``field`` or ``section.field``) from its string form."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        set_field(getattr(cfg, section), name, raw)
        if section == "env":
            cfg.env.__post_init__()
    else:
        if key in SECTIONS:
            raise ConfigError(f"{key!r} is a section, not a setting")
        set_field(cfg, key, raw)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "experiment":
                apply_override(cfg, key, raw)
            elif section in SECTIONS:
                apply_override(cfg, f"{section}.{key}", raw)
            else:
                raise ConfigError(f"unknown section [{section}] in {path}")
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    top = {f.name: _format(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in SECTIONS}
    parser["experiment"] = top
    for name in SECTIONS:
        sub = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(dump_config(cfg))


def env_overrides(cfg: ExperimentConfig, environ=os.environ) -> ExperimentConfig:
    """ESCE_OUTPUT_DIR and ESCE_SEED take precedence over file values."""
    if environ.get("ESCE_OUTPUT_DIR"):
        cfg.output_dir = environ["ESCE_OUTPUT_DIR"]
    if environ.get("ESCE_SEED"):
        cfg.seeds = _coerce(environ["ESCE_SEED"], List[int])
    return cfg
