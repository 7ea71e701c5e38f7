"""Flat key-value experiment configuration (YAML syntax, one level deep).

Example::

    version: 1
    mode: tabular          # or lowrank
    S: 5
    A: 3
    H: 4
    d: 2                   # lowrank only
    class_size: 4          # lowrank only
    generator_seed: 2023
    epsilon: 0.1
    delta: 0.1
    tau: 0.5
    kappa: 0.1
    episode_cap: 5000
    beta3: 1.0
    seeds: [0, 1, 2]
    tasks: ["random:same:0.5", "random:random:0.4"]
    cost: random           # or zero

A planning task reads ``reward:cost:tau``; ``cost`` is ``same`` (reuse the
exploration cost), ``random`` (a fresh cost) or ``zero``, and ``tau`` is a
number or ``same``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..errors import ParameterError

CONFIG_VERSION = 1

DEFAULT_TASKS = ("random:same:same", "random:random:0.45", "random:same:0.4")


@dataclass(frozen=True)
class TaskSpec:
    reward: str
    cost: str
    tau: Optional[float]  # None means "same as exploration"

    @classmethod
    def parse(cls, text: str) -> "TaskSpec":
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError(f"task {text!r} must look like reward:cost:tau")
        reward, cost, tau = parts
        if reward != "random":
            raise ParameterError(f"unknown reward kind {reward!r}")
        if cost not in ("same", "random", "zero"):
            raise ParameterError(f"unknown cost kind {cost!r}")
        tau_v = None if tau == "same" else float(tau)
        if tau_v is not None and not 0 < tau_v <= 1:
            raise ParameterError("planning tau must lie in (0, 1]")
        return cls(reward, cost, tau_v)

    def __str__(self) -> str:
        return f"{self.reward}:{self.cost}:{'same' if self.tau is None else repr(self.tau)}"


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "tabular"
    S: int = 5
    A: int = 3
    H: int = 4
    d: int = 2
    class_size: int = 4
    generator_seed: int = 2023
    epsilon: float = 0.1
    delta: float = 0.1
    tau: float = 0.5
    kappa: float = 0.1
    episode_cap: Optional[int] = None
    beta3: float = 1.0
    cost: str = "random"
    seeds: tuple = tuple(range(20))
    tasks: tuple = DEFAULT_TASKS
    output_dir: str = "runs/default"
    solver_starts: int = 8
    error_bound_utilities: int = 50
    error_bound_policies: int = 10
    # non-default knobs, documented in the README
    beta0_override: Optional[float] = None
    alpha_hat_override: Optional[float] = None
    zeta_override: Optional[float] = None
    threshold_override: Optional[float] = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ParameterError(f"unsupported config version {self.version}")
        if self.mode not in ("tabular", "lowrank"):
            raise ParameterError(f"mode must be tabular or lowrank, got {self.mode!r}")
        if not 0 < self.tau <= 1:
            raise ParameterError("tau must lie in (0, 1]")
        if not 0 < self.kappa < self.tau:
            raise ParameterError("kappa must lie in (0, tau)")
        if self.cost not in ("random", "zero"):
            raise ParameterError("cost must be random or zero")
        self.task_specs  # parsing validates
        if min(self.S, self.A, self.H) < 1:
            raise ParameterError("S, A, H must be positive")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "tasks", tuple(str(t) for t in self.tasks))

    @property
    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec.parse(t) for t in self.tasks]

    @property
    def cap(self) -> int:
        if self.episode_cap is not None:
            return int(self.episode_cap)
        return 5000 if self.mode == "tabular" else 2000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["tasks"] = list(self.tasks)
        return d

    def with_(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig(**d)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ParameterError(f"{path}: expected a flat key-value mapping")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ParameterError(f"{path}: nested value for key {k!r}; the format is flat")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ParameterError(f"{path}: unknown keys {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if "version" not in raw:
        raise ParameterError(f"{path}: missing version field")
    return ExperimentConfig(**raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
