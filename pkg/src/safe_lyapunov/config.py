"""Experiment configuration.

Configs are TOML files whose tables mirror the dataclasses below. Every
field has a default, so an empty file is a valid pendulum config; unknown
tables or keys are rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "PendulumConfig",
    "Toy1DConfig",
    "GridConfig",
    "ActionConfig",
    "KernelConfig",
    "BetaConfig",
    "CostConfig",
    "PolicyConfig",
    "LyapunovConfig",
    "RunConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "toy_1d_defaults",
    "schema",
]


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass
class PendulumConfig:
    mass: float = 0.15
    length: float = 0.5
    gravity: float = 9.81
    friction: float = 0.05
    u_max: float = float("nan")  # nan: half of m g l
    dt: float = 0.02
    prior_mass: float = 0.10
    prior_friction: float = 0.0
    substeps: int = 5
    angle_range: float = float("nan")  # nan: twice the saturation angle
    velocity_range: float = 4.0
    action_bound: float = 0.25


@dataclass
class Toy1DConfig:
    h: float = 0.1
    cubic: float = 1.0
    gain: float = 1.0
    prior_gain: float = 0.8
    action_bound: float = 1.0


@dataclass
class GridConfig:
    cells_per_axis: list = field(default_factory=lambda: [601, 601])
    value_cells_per_axis: list = field(default_factory=lambda: [101, 101])


@dataclass
class ActionConfig:
    count: int = 41
    u_bar: float = 0.05


@dataclass
class KernelConfig:
    linear_variances: list = field(default_factory=lambda: [0.02, 0.05, 0.5])
    matern_lengthscales: list = field(default_factory=lambda: [0.5, 1.0, 1.0])
    matern_variance: float = 1e-4
    noise_sigma: float = 1e-3


@dataclass
class BetaConfig:
    mode: str = "fixed"
    value: float = 2.0
    rkhs_bound: float = 1.0
    delta: float = 0.05
    info_candidates: int = 2000


@dataclass
class CostConfig:
    q_diag: list = field(default_factory=lambda: [1.0, 1.0])
    r_diag: list = field(default_factory=lambda: [4.8])
    gamma: float = 0.98
    lagrange: float = 0.3


@dataclass
class PolicyConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    lipschitz_cap: float = 1.1
    learning_rate: float = 0.05
    sgd_steps: int = 20
    batch_size: int = 256
    level_factor: float = 2.0
    update_every: int = 1
    init_noise: float = 1e-3


@dataclass
class LyapunovConfig:
    candidate: str = "value"  # value | quadratic
    s0_radius: float = 0.27
    s0_action_tol: float = 0.1  # exploration pairs: |u - pi_0(x)| <= tol ||x||_1
    s0_policy_tol: float = 1.0  # policy rows, see Setup.s0_window
    local_lipschitz: bool = True
    model_error_lipschitz: float = float("nan")  # nan: finite-difference estimate
    adp_tol: float = 1e-9


@dataclass
class RunConfig:
    environment: str = "pendulum"
    iterations: int = 50
    seed: int = 0
    output_dir: str = "runs/pendulum"
    oracle_horizon: float = 10.0
    ball_radius: float = 1e-2
    check_soundness: bool = True
    backup_steps: int = 50
    rollout_start: list = field(default_factory=lambda: [0.5, 0.0])
    rollout_steps: int = 100
    certificate_every: int = 10


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    pendulum: PendulumConfig = field(default_factory=PendulumConfig)
    toy_1d: Toy1DConfig = field(default_factory=Toy1DConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    actions: ActionConfig = field(default_factory=ActionConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    beta: BetaConfig = field(default_factory=BetaConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    lyapunov: LyapunovConfig = field(default_factory=LyapunovConfig)

    def validate(self) -> "ExperimentConfig":
        _validate(self)
        return self

    @property
    def state_dim(self) -> int:
        return 2 if self.run.environment == "pendulum" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _validate(cfg: ExperimentConfig) -> None:
    r = cfg.run
    if r.environment not in ("pendulum", "toy_1d"):
        raise ConfigError(f"run.environment must be 'pendulum' or 'toy_1d', got {r.environment!r}")
    if r.iterations < 0:
        raise ConfigError("run.iterations must be non-negative")
    if not (r.oracle_horizon > 0 and r.ball_radius > 0):
        raise ConfigError("run.oracle_horizon and run.ball_radius must be positive")
    d = cfg.state_dim
    for name in ("cells_per_axis", "value_cells_per_axis"):
        cells = getattr(cfg.grid, name)
        if len(cells) != d or any(int(c) < 2 for c in cells):
            raise ConfigError(f"grid.{name} needs {d} entries of at least 2")
    if len(r.rollout_start) != d:
        raise ConfigError(f"run.rollout_start needs {d} entries")
    if len(cfg.cost.q_diag) != d or len(cfg.cost.r_diag) != 1:
        raise ConfigError("cost.q_diag must match the state dimension and cost.r_diag have one entry")
    if len(cfg.kernel.linear_variances) != d + 1 or len(cfg.kernel.matern_lengthscales) != d + 1:
        raise ConfigError(f"kernel hyperparameter lists need {d + 1} entries")
    if cfg.kernel.noise_sigma <= 0:
        raise ConfigError("kernel.noise_sigma must be positive")
    if cfg.beta.mode not in ("fixed", "theoretical"):
        raise ConfigError("beta.mode must be 'fixed' or 'theoretical'")
    if not 0 < cfg.beta.delta < 1:
        raise ConfigError("beta.delta must lie in (0, 1)")
    if not 0 < cfg.cost.gamma < 1:
        raise ConfigError("cost.gamma must lie in (0, 1)")
    if cfg.actions.count < 1 or not cfg.actions.u_bar > 0:
        raise ConfigError("actions.count must be positive and actions.u_bar > 0")
    if cfg.lyapunov.candidate not in ("value", "quadratic"):
        raise ConfigError("lyapunov.candidate must be 'value' or 'quadratic'")
    if not cfg.lyapunov.s0_radius > 0 or min(cfg.lyapunov.s0_action_tol, cfg.lyapunov.s0_policy_tol) < 0:
        raise ConfigError("lyapunov.s0_radius must be positive and the S_0 tolerances non-negative")
    p = cfg.policy
    if p.lipschitz_cap <= 0 or p.sgd_steps < 0 or p.batch_size < 1 or p.update_every < 1:
        raise ConfigError("invalid policy optimization settings")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if default is dataclasses.MISSING:
            default = known[name].default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be a boolean")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name} must be an integer")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number")
            kwargs[name] = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name} must be an array")
            kwargs[name] = list(value)
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name} must be a string")
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config; environment presets fill unset fields."""
    env = data.get("run", {}).get("environment", "pendulum") if isinstance(data.get("run", {}), dict) else None
    base = toy_1d_defaults() if env == "toy_1d" else ExperimentConfig()
    merged = _merge(dataclasses.asdict(base), data)
    return _build(ExperimentConfig, merged, "root").validate()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def toy_1d_defaults() -> ExperimentConfig:
    """Preset for the scalar illustration system."""
    cfg = ExperimentConfig()
    cfg.run = RunConfig(
        environment="toy_1d",
        iterations=30,
        output_dir="runs/toy_1d",
        oracle_horizon=300.0,  # the toy has a unit time step
        backup_steps=50,
        rollout_start=[0.4],
        rollout_steps=100,
        certificate_every=1,
    )
    cfg.grid = GridConfig(cells_per_axis=[2001], value_cells_per_axis=[201])
    cfg.actions = ActionConfig(count=41, u_bar=0.3)
    cfg.kernel = KernelConfig(
        linear_variances=[0.01, 0.01], matern_lengthscales=[0.3, 1.0], matern_variance=1e-3, noise_sigma=1e-3
    )
    cfg.cost = CostConfig(q_diag=[1.0], r_diag=[1.0], gamma=0.98, lagrange=1.0)
    cfg.policy = PolicyConfig(lipschitz_cap=3.0, learning_rate=0.02, level_factor=1.5)
    cfg.lyapunov = LyapunovConfig(candidate="quadratic", s0_radius=0.1)
    return cfg


def schema() -> str:
    """Human-readable listing of every table, key, type and default."""
    lines = []
    root = ExperimentConfig()
    for top in dataclasses.fields(ExperimentConfig):
        lines.append(f"[{top.name}]")
        section = getattr(root, top.name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, float) and math.isnan(value):
                shown = "nan (derived)"
            else:
                shown = repr(value)
            lines.append(f"{f.name} = {shown}  # {type(value).__name__}")
        lines.append("")
    return "\n".join(lines)


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Write the resolved config as TOML (derived nan values are omitted)."""
    out = []
    for top, section in cfg.to_dict().items():
        out.append(f"[{top}]")
        for key, value in section.items():
            if isinstance(value, float) and math.isnan(value):
                continue
            out.append(f"{key} = {_toml_value(value)}")
        out.append("")
    Path(path).write_text("\n".join(out))


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)
