"""Experiment configuration and JSON loaders for the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .tightening import LtvSystem

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "experiment_config_from_dict",
    "load_experiment_config",
    "save_experiment_config",
    "load_system",
    "system_from_dict",
]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Bad or inconsistent configuration input."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Two-agent reach-avoid study parameters.

    Geometry is expressed in meters on the plane; times in seconds.
    The defaults reproduce the shipped study: a unit obstacle square at
    the origin, a unit goal box centered at (2, 0), two double
    integrators starting left of the obstacle, and heavy-tailed
    velocity noise.
    """

    dt_sys: float = 0.1
    dt_ctrl: float = 0.5
    mission_time: float = 3.0
    runs: int = 100
    seed: int = 7
    noise_variance: float = 0.005
    noise_dof: float = 3.0
    start1: tuple[float, float] = (-2.0, 0.0)
    start2: tuple[float, float] = (-2.0, -0.75)
    obstacle_center: tuple[float, float] = (0.0, 0.0)
    obstacle_half: float = 0.5
    goal_center: tuple[float, float] = (2.0, 0.0)
    goal_half: float = 0.5
    goal_start_time: float = 2.0
    formation_start_time: float = 1.0
    formation_limit: float = 1.0
    delta_obstacle: float = 0.1
    delta_goal: float = 0.5
    delta_formation: float = 0.5
    saturation_time: float = 1.0
    u_max: float = 3.0
    control_weight: float = 1.0
    goal_weight: float = 0.1
    eps: float = 1e-6
    # Node cap, not a wall-clock cap: counts are machine independent, so
    # capped windows still replan identically across hosts.  A capped
    # window keeps its best incumbent.  The time limit is a safety net.
    max_nodes_per_window: int = 350
    time_limit_per_window: float = 60.0
    milp_rel_gap: float = 0.02

    def __post_init__(self) -> None:
        if self.dt_sys <= 0 or self.dt_ctrl <= 0 or self.mission_time <= 0:
            raise ConfigError("time steps and mission length must be positive")
        ratio = self.dt_ctrl / self.dt_sys
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("dt_ctrl must be an integer multiple of dt_sys")
        steps = self.mission_time / self.dt_ctrl
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("mission_time must be a multiple of dt_ctrl")
        for name in ("delta_obstacle", "delta_goal", "delta_formation"):
            d = getattr(self, name)
            if not (0.0 < d < 1.0):
                raise ConfigError(f"{name} must lie in (0, 1), got {d}")
        if self.noise_dof <= 2.0:
            raise ConfigError("noise_dof must exceed 2 for a finite variance")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be nonnegative")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.u_max <= 0:
            raise ConfigError("u_max must be positive")
        if not (
            self.obstacle_half > 0 and self.goal_half > 0 and self.formation_limit > 0
        ):
            raise ConfigError("box half-widths and formation limit must be positive")
        if not (0.0 <= self.milp_rel_gap < 1.0):
            raise ConfigError("milp_rel_gap must lie in [0, 1)")

    @property
    def ratio(self) -> int:
        return int(round(self.dt_ctrl / self.dt_sys))

    @property
    def ctrl_steps(self) -> int:
        return int(round(self.mission_time / self.dt_ctrl))

    @property
    def fine_steps(self) -> int:
        return self.ctrl_steps * self.ratio

    @property
    def saturation_steps(self) -> int:
        return max(0, int(round(self.saturation_time / self.dt_ctrl)))

    def to_dict(self) -> dict:
        d = {"version": CONFIG_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d


_TUPLE_FIELDS = {"start1", "start2", "obstacle_center", "goal_center"}


def experiment_config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a JSON object")
    d = dict(d)
    version = d.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS & set(d):
        v = d[key]
        if not (isinstance(v, (list, tuple)) and len(v) == 2):
            raise ConfigError(f"{key} must be a pair [x, y]")
        d[key] = (float(v[0]), float(v[1]))
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return experiment_config_from_dict(data)


def save_experiment_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


def _matrix_seq(value, name: str):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3:
        return [arr[k] for k in range(arr.shape[0])]
    raise ConfigError(f"{name} must be a matrix or a list of matrices")


def system_from_dict(d: dict) -> LtvSystem:
    if not isinstance(d, dict):
        raise ConfigError("system config must be a JSON object")
    d = dict(d)
    version = d.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported system config version {version!r}")
    try:
        A = _matrix_seq(d.pop("A"), "A")
        B = _matrix_seq(d.pop("B"), "B")
    except KeyError as exc:
        raise ConfigError(f"system config missing key {exc}") from None
    horizon = d.pop("horizon", None)
    w_mean = d.pop("w_mean", None)
    w_cov = d.pop("w_cov", None)
    if d:
        raise ConfigError(f"unknown system keys: {sorted(d)}")
    if horizon is None:
        if isinstance(A, list):
            horizon = len(A)
        else:
            raise ConfigError("system config needs a horizon for constant matrices")
    if w_mean is not None:
        wm = np.asarray(w_mean, dtype=float)
        w_mean = [wm[k] for k in range(wm.shape[0])] if wm.ndim == 2 else wm
    if w_cov is not None:
        w_cov = _matrix_seq(w_cov, "w_cov")
    try:
        return LtvSystem(A=A, B=B, w_mean=w_mean, w_cov=w_cov, horizon=int(horizon))
    except Exception as exc:
        raise ConfigError(f"bad system config: {exc}") from None


def load_system(path) -> LtvSystem:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read system {path}: {exc}") from None
    return system_from_dict(data)
