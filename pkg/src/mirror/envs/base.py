"""Environment plumbing shared by the three domains."""

from __future__ import annotations

import json
from importlib import resources


class DomainError(ValueError):
    """Invalid domain input: unknown scenario, bad action id, layout mismatch."""


def load_scenarios(name: str) -> dict:
    path = resources.files("mirror.envs") / "scenarios" / f"{name}.json"
    return json.loads(path.read_text())


def make_env(domain: str, scenario: int, variant: str = "original"):
    from .bomb import BombEnv
    from .driving import DrivingEnv
    from .rescue import RescueEnv

    envs = {"driving": DrivingEnv, "rescue": RescueEnv, "bomb": BombEnv}
    if domain not in envs:
        raise DomainError(f"unknown domain {domain!r}")
    return envs[domain](scenario, variant)
