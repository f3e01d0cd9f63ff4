"""Experiment configuration: one YAML-loadable dataclass tree."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from ..baselines import BCConfig, SQILConfig
from ..communication import PlanConfig
from ..implants import ImplantFitConfig
from ..policy_rl import DQNConfig, ExplorationSchedule
from ..types import UsageError
from ..world_model import WorldModelTrainConfig

METHODS = ("nc", "bc", "sqil", "mirror", "mirror_p", "mirror_kl", "im")
DATA_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class DatasetConfig:
    rounds_per_persona: int = 40  # first 20 train; of the last 20: 10 val, 6 test
    robot_episodes: int = 160
    robot_random_eps: float = 0.3


@dataclass
class ExperimentConfig:
    domain: str = "driving"
    variant: str = "transfer"
    methods: tuple[str, ...] = ("nc", "mirror", "im")
    data_fraction: float = 0.2
    personas: tuple[str, ...] = ()  # empty = all ten presets
    root_seed: int = 1234
    episodes: int = 100
    workdir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    world_model: WorldModelTrainConfig = field(default_factory=lambda: WorldModelTrainConfig(epochs=150))
    dqn: DQNConfig = field(default_factory=DQNConfig)
    schedule: ExplorationSchedule = field(default_factory=ExplorationSchedule)
    implant_fit: ImplantFitConfig = field(default_factory=ImplantFitConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    sqil: SQILConfig = field(default_factory=SQILConfig)
    planner: PlanConfig = field(default_factory=PlanConfig)

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}")
        if self.domain not in ("driving", "rescue", "bomb"):
            raise UsageError(f"unknown domain {self.domain!r}")
        if self.variant not in ("original", "transfer"):
            raise UsageError(f"unknown variant {self.variant!r}")
        if not any(abs(self.data_fraction - f) < 1e-9 for f in DATA_FRACTIONS):
            raise UsageError(f"data fraction must be one of {DATA_FRACTIONS}")
        if self.domain == "bomb" and self.variant == "original":
            # the bomb task is only interesting when the robot's rules are stale
            pass

    def to_yaml(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=True))

    @staticmethod
    def from_yaml(path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        return ExperimentConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        sub = {
            "dataset": DatasetConfig,
            "world_model": WorldModelTrainConfig,
            "dqn": DQNConfig,
            "schedule": ExplorationSchedule,
            "implant_fit": ImplantFitConfig,
            "bc": BCConfig,
            "sqil": SQILConfig,
            "planner": PlanConfig,
        }
        kwargs = {}
        for key, value in raw.items():
            if key in sub:
                params = dict(value)
                for k, v in params.items():
                    if isinstance(v, list):
                        params[k] = tuple(v)
                kwargs[key] = sub[key](**params)
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return ExperimentConfig(**kwargs)
