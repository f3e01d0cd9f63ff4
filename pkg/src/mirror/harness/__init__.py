"""Experiment orchestration: configs, episode runners, metrics, the session service."""
