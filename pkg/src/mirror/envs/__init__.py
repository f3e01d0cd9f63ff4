"""Gridworld task environments: driving, search-&-rescue, bomb defusal."""

from .base import DomainError, make_env
from .bomb import BombEnv, bomb_arch
from .driving import DrivingEnv, driving_arch
from .rescue import RescueEnv, rescue_arch

ARCH_BUILDERS = {"driving": driving_arch, "rescue": rescue_arch, "bomb": bomb_arch}


def arch_for(domain: str):
    try:
        return ARCH_BUILDERS[domain]()
    except KeyError:
        raise DomainError(f"unknown domain {domain!r}") from None


__all__ = [
    "DomainError",
    "make_env",
    "arch_for",
    "DrivingEnv",
    "RescueEnv",
    "BombEnv",
    "driving_arch",
    "rescue_arch",
    "bomb_arch",
]
