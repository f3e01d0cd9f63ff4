"""MIRROR: self-model based human modeling and assistive communication planning."""

__version__ = "0.1.0"
