"""Core data types shared across the package.

Trajectory files are line-delimited JSON: a header line opens each
trajectory, followed by one line per step. Simulated experiments and live
sessions write the same schema (``mirror.trajectory.v1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORY_SCHEMA = "mirror.trajectory.v1"


class NumericInputError(ValueError):
    """Non-finite values where finite numerics are required."""


class UsageError(ValueError):
    """API misuse: empty inputs, invalid configuration values."""


@dataclass
class LatentBelief:
    """Diagonal-Gaussian belief over the latent state."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/var shape mismatch")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.var))):
            raise NumericInputError("belief parameters must be finite")
        if np.any(self.var <= 0.0):
            raise ValueError("belief variance must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.shape)

    @staticmethod
    def standard(dim: int) -> "LatentBelief":
        return LatentBelief(np.zeros(dim), np.ones(dim))


@dataclass
class ModalityBundle:
    """Per-modality observation payloads plus presence flags.

    Absent modalities carry an all-zero payload and present=False; the
    payload arrays always exist so shapes stay fixed.
    """

    payloads: dict[str, np.ndarray]
    present: dict[str, bool]

    def __post_init__(self):
        for name, arr in self.payloads.items():
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericInputError(f"non-finite payload for modality {name!r}")
            self.payloads[name] = arr
            if name not in self.present:
                raise ValueError(f"missing presence flag for modality {name!r}")
        if not self.present.keys() == self.payloads.keys():
            raise ValueError("presence flags do not match payloads")

    def masked(self) -> "ModalityBundle":
        """Copy with absent payloads zeroed (the canonical form)."""
        pay = {
            m: (arr.copy() if self.present[m] else np.zeros_like(arr))
            for m, arr in self.payloads.items()
        }
        return ModalityBundle(pay, dict(self.present))

    def copy(self) -> "ModalityBundle":
        return ModalityBundle(
            {m: arr.copy() for m, arr in self.payloads.items()}, dict(self.present)
        )

    @staticmethod
    def absent(dims: dict[str, int]) -> "ModalityBundle":
        return ModalityBundle(
            {m: np.zeros(d) for m, d in dims.items()},
            {m: False for m in dims},
        )


@dataclass
class Step:
    obs: ModalityBundle
    action: int
    reward: float


@dataclass
class TrajectoryRecord:
    """One episode: (observation bundle, action, reward) per step."""

    steps: list[Step]
    domain: str = ""
    variant: str = "original"
    scenario: int = 0
    persona: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("trajectory must be nonempty")
        for s in self.steps:
            if not np.isfinite(s.reward):
                raise NumericInputError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))


def dump_trajectories(fh, records: list[TrajectoryRecord]) -> None:
    for rec in records:
        header = {
            "kind": "header",
            "schema": TRAJECTORY_SCHEMA,
            "domain": rec.domain,
            "variant": rec.variant,
            "scenario": rec.scenario,
            "persona": rec.persona,
            "seed": rec.seed,
            "extra": rec.extra,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t, s in enumerate(rec.steps):
            line = {
                "kind": "step",
                "t": t,
                "obs": {m: arr.tolist() for m, arr in s.obs.payloads.items()},
                "present": dict(s.obs.present),
                "action": int(s.action),
                "reward": float(s.reward),
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def save_trajectories(path, records: list[TrajectoryRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        dump_trajectories(fh, records)


def load_trajectories(path) -> list[TrajectoryRecord]:
    records: list[TrajectoryRecord] = []
    header = None
    steps: list[Step] = []

    def flush():
        nonlocal steps, header
        if header is not None:
            records.append(
                TrajectoryRecord(
                    steps=steps,
                    domain=header["domain"],
                    variant=header["variant"],
                    scenario=header["scenario"],
                    persona=header["persona"],
                    seed=header["seed"],
                    extra=header.get("extra", {}),
                )
            )
        steps = []

    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            if obj["kind"] == "header":
                flush()
                if obj.get("schema") != TRAJECTORY_SCHEMA:
                    raise ValueError(f"unsupported trajectory schema: {obj.get('schema')!r}")
                header = obj
            elif obj["kind"] == "step":
                bundle = ModalityBundle(
                    {m: np.asarray(v, dtype=np.float64) for m, v in obj["obs"].items()},
                    {m: bool(v) for m, v in obj["present"].items()},
                )
                steps.append(Step(bundle, int(obj["action"]), float(obj["reward"])))
            else:
                raise ValueError(f"unknown record kind {obj['kind']!r}")
    flush()
    return records
